/// Keys and values of one transformer layer, row-major `[positions, d]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerKv {
    pub keys: Vec<f64>,
    pub values: Vec<f64>,
}

/// Per-layer attention history that lets each new token be processed without
/// recomputing the prefix. `Clone` is a deep copy.
#[derive(Clone, Debug, PartialEq)]
pub struct KvCache {
    layers: Vec<LayerKv>,
    dim: usize,
    position_count: usize,
    /// Backbone output at the most recent position.
    last_hidden: Vec<f64>,
}

impl KvCache {
    pub fn new(layers: usize, dim: usize) -> Self {
        Self {
            layers: vec![LayerKv { keys: Vec::new(), values: Vec::new() }; layers],
            dim,
            position_count: 0,
            last_hidden: Vec::new(),
        }
    }

    pub fn position_count(&self) -> usize {
        self.position_count
    }

    pub fn layers(&self) -> &[LayerKv] {
        &self.layers
    }

    pub(crate) fn layer_mut(&mut self, l: usize) -> &mut LayerKv {
        &mut self.layers[l]
    }

    /// Hidden state at the last processed position (empty before the first token).
    pub fn last_hidden(&self) -> &[f64] {
        &self.last_hidden
    }

    pub(crate) fn finish_position(&mut self, hidden: Vec<f64>) {
        self.position_count += 1;
        self.last_hidden = hidden;
    }

    /// Every layer stores exactly `position_count` keys and values.
    pub fn is_consistent(&self) -> bool {
        self.layers.iter().all(|l| {
            l.keys.len() == self.position_count * self.dim && l.values.len() == self.position_count * self.dim
        })
    }
}
