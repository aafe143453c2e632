//! Architecture hyperparameters.

use crate::error::{Error, Result};

/// Every architecture hyperparameter of a MambaCapsule model.
///
/// The defaults follow the six-layer configuration the layer-count ablation
/// favours; [`ModelConfig::tiny`] is the desk-scale variant used by tests.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Samples per beat.
    pub seq_len: usize,
    /// Channel width of the feature network.
    pub d_model: usize,
    pub n_layers: usize,
    /// State size of every SSM branch.
    pub d_state: usize,
    /// Parallel SSM branches per fusion block; must divide `d_model`.
    pub n_branches: usize,
    /// Width of the depthwise convolution shared by a fusion block.
    pub conv_width: usize,
    pub dropout: f64,
    /// Average-pooling stride that turns features into primary capsules.
    pub pool_stride: usize,
    pub primary_dim: usize,
    pub class_dim: usize,
    pub n_classes: usize,
    pub routing_iters: usize,
    pub recon_hidden: [usize; 2],
    /// Fraction of the beat, centred, that the reconstructor reproduces.
    pub window_fraction: f64,
    /// Finish the reconstructor with a sigmoid (inputs normalised to [0, 1]).
    pub recon_sigmoid: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            seq_len: 187,
            d_model: 32,
            n_layers: 6,
            d_state: 8,
            n_branches: 2,
            conv_width: 3,
            dropout: 0.1,
            pool_stride: 17,
            primary_dim: 8,
            class_dim: 16,
            n_classes: 5,
            routing_iters: 3,
            recon_hidden: [64, 128],
            window_fraction: 0.6,
            recon_sigmoid: true,
        }
    }
}

impl ModelConfig {
    /// Every field as a `key=value` pair, in declaration order.
    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("seq_len", self.seq_len.to_string()),
            ("d_model", self.d_model.to_string()),
            ("n_layers", self.n_layers.to_string()),
            ("d_state", self.d_state.to_string()),
            ("n_branches", self.n_branches.to_string()),
            ("conv_width", self.conv_width.to_string()),
            ("dropout", self.dropout.to_string()),
            ("pool_stride", self.pool_stride.to_string()),
            ("primary_dim", self.primary_dim.to_string()),
            ("class_dim", self.class_dim.to_string()),
            ("n_classes", self.n_classes.to_string()),
            ("routing_iters", self.routing_iters.to_string()),
            (
                "recon_hidden",
                format!("{},{}", self.recon_hidden[0], self.recon_hidden[1]),
            ),
            ("window_fraction", self.window_fraction.to_string()),
            ("recon_sigmoid", self.recon_sigmoid.to_string()),
        ]
    }

    /// Sets one field from its textual form. Unknown keys are an error.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "seq_len" => self.seq_len = parse(key, value)?,
            "d_model" => self.d_model = parse(key, value)?,
            "n_layers" => self.n_layers = parse(key, value)?,
            "d_state" => self.d_state = parse(key, value)?,
            "n_branches" => self.n_branches = parse(key, value)?,
            "conv_width" => self.conv_width = parse(key, value)?,
            "dropout" => self.dropout = parse(key, value)?,
            "pool_stride" => self.pool_stride = parse(key, value)?,
            "primary_dim" => self.primary_dim = parse(key, value)?,
            "class_dim" => self.class_dim = parse(key, value)?,
            "n_classes" => self.n_classes = parse(key, value)?,
            "routing_iters" => self.routing_iters = parse(key, value)?,
            "recon_hidden" => {
                let parts: Vec<&str> = value.split(',').collect();
                if parts.len() != 2 {
                    return Err(Error::Config(format!(
                        "recon_hidden expects two comma-separated sizes, got {value:?}"
                    )));
                }
                self.recon_hidden = [parse(key, parts[0])?, parse(key, parts[1])?];
            }
            "window_fraction" => self.window_fraction = parse(key, value)?,
            "recon_sigmoid" => self.recon_sigmoid = parse(key, value)?,
            _ => return Err(Error::Config(format!("unknown model key {key:?}"))),
        }
        Ok(())
    }

    /// Desk-scale configuration: two narrow layers, two classes.
    pub fn tiny() -> Self {
        Self {
            d_model: 8,
            n_layers: 2,
            d_state: 4,
            pool_stride: 11,
            n_classes: 2,
            recon_hidden: [32, 64],
            ..Self::default()
        }
    }

    /// Length of the reconstructed central window.
    pub fn recon_len(&self) -> usize {
        ((self.window_fraction * self.seq_len as f64).round() as usize).max(1)
    }

    /// Number of primary capsules per beat.
    pub fn n_primary(&self) -> usize {
        self.seq_len / self.pool_stride * self.d_model / self.primary_dim
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.seq_len == 0 || self.d_model == 0 || self.d_state == 0 || self.n_classes == 0 {
            return fail("seq_len, d_model, d_state and n_classes must be positive".into());
        }
        if self.n_layers < 1 {
            return fail("n_layers must be at least 1".into());
        }
        if self.n_branches == 0 || !self.d_model.is_multiple_of(self.n_branches) {
            return fail(format!(
                "n_branches ({}) must divide d_model ({})",
                self.n_branches, self.d_model
            ));
        }
        if self.conv_width.is_multiple_of(2) {
            return fail(format!("conv_width ({}) must be odd", self.conv_width));
        }
        if self.pool_stride == 0 || !self.seq_len.is_multiple_of(self.pool_stride) {
            return fail(format!(
                "pool_stride ({}) must divide seq_len ({})",
                self.pool_stride, self.seq_len
            ));
        }
        let pooled = self.seq_len / self.pool_stride * self.d_model;
        if self.primary_dim == 0 || !pooled.is_multiple_of(self.primary_dim) {
            return fail(format!(
                "primary_dim ({}) must divide pooled feature size ({pooled})",
                self.primary_dim
            ));
        }
        if self.class_dim == 0 {
            return fail("class_dim must be positive".into());
        }
        if self.routing_iters < 1 {
            return fail("routing_iters must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout ({}) must lie in [0, 1)", self.dropout));
        }
        if !(self.window_fraction > 0.0 && self.window_fraction <= 1.0) {
            return fail(format!("window_fraction ({}) must lie in (0, 1]", self.window_fraction));
        }
        if self.recon_hidden.contains(&0) {
            return fail("recon_hidden sizes must be positive".into());
        }
        Ok(())
    }
}

pub(crate) fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {value:?} for {key}")))
}
