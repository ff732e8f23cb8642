use crate::tensor::Matrix;

/// Full-length keys and values of one layer, rows indexed by patch.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerKv {
    pub k: Matrix,
    pub v: Matrix,
}

/// Per-layer key/value caches for attention recovery.
///
/// Keys are stored after the rotary embedding. A selective forward rewrites
/// only the rows of its active tokens; every other row keeps the value from
/// the last forward that computed it.
#[derive(Clone, Debug, PartialEq)]
pub struct KvCache {
    pub layers: Vec<LayerKv>,
    valid: bool,
    last_full_step: Option<usize>,
}

impl KvCache {
    pub fn new(layers: usize, num_patches: usize, dim: usize) -> Self {
        Self {
            layers: (0..layers)
                .map(|_| LayerKv {
                    k: Matrix::zeros(num_patches, dim),
                    v: Matrix::zeros(num_patches, dim),
                })
                .collect(),
            valid: false,
            last_full_step: None,
        }
    }

    /// True once a full-sequence forward has filled every row.
    pub fn is_valid(&self) -> bool {
        self.valid
    }

    pub fn last_full_step(&self) -> Option<usize> {
        self.last_full_step
    }

    pub(crate) fn mark_filled(&mut self) {
        self.valid = true;
    }

    /// Records the sampling step of the most recent full write.
    pub fn set_last_full_step(&mut self, step: usize) {
        self.last_full_step = Some(step);
    }

    pub fn invalidate(&mut self) {
        self.valid = false;
        self.last_full_step = None;
    }
}
