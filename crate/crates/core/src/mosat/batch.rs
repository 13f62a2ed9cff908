use std::rc::Rc;

use crate::envsim::{LimbObservation, OBS_DIM};
use crate::error::{Error, Result};
use crate::numcore::Tensor;

/// Variable-length token sequences padded to a common length.
#[derive(Clone, Debug)]
pub struct PaddedBatch {
    /// `[B·L_m × d]`, padded rows zero.
    pub states: Tensor,
    /// Embedding row per padded slot; `None` for padding and unseen paths.
    pub rows: Vec<Option<usize>>,
    pub counts: Vec<usize>,
    pub max_len: usize,
}

impl PaddedBatch {
    /// `items` pairs each morphology's observations with its embedding rows.
    pub fn new(items: &[(&[LimbObservation], Vec<Option<usize>>)]) -> Result<Self> {
        if items.is_empty() {
            return Err(Error::Dimension("empty batch".into()));
        }
        let max_len = items.iter().map(|(o, _)| o.len()).max().unwrap_or(0);
        let b = items.len();
        let mut states = vec![0.0; b * max_len * OBS_DIM];
        let mut rows = vec![None; b * max_len];
        let mut counts = Vec::with_capacity(b);
        for (i, (obs, r)) in items.iter().enumerate() {
            if obs.is_empty() || obs.len() != r.len() {
                return Err(Error::Dimension(format!(
                    "batch item {i}: {} observations and {} embedding rows",
                    obs.len(),
                    r.len()
                )));
            }
            for (t, o) in obs.iter().enumerate() {
                let at = (i * max_len + t) * OBS_DIM;
                states[at..at + OBS_DIM].copy_from_slice(o);
                rows[i * max_len + t] = r[t];
            }
            counts.push(obs.len());
        }
        Ok(Self { states: Tensor::new(vec![b * max_len, OBS_DIM], states)?, rows, counts, max_len })
    }

    pub fn batch_size(&self) -> usize {
        self.counts.len()
    }

    /// `P[i][j] = 1` iff slot `j` of item `i` holds a real limb.
    pub fn pad_matrix(&self) -> Vec<Vec<u8>> {
        self.counts.iter().map(|&c| (0..self.max_len).map(|j| u8::from(j < c)).collect()).collect()
    }

    /// Additive attention mask `[B × L_m × L_m]`: 0 for real keys, −∞ for padding.
    pub fn attention_mask(&self) -> Rc<Tensor> {
        let l = self.max_len;
        let mut data = vec![0.0; self.batch_size() * l * l];
        for (b, &c) in self.counts.iter().enumerate() {
            for q in 0..l {
                for k in c..l {
                    data[(b * l + q) * l + k] = f64::NEG_INFINITY;
                }
            }
        }
        Rc::new(Tensor::new(vec![self.batch_size(), l, l], data).expect("mask shape"))
    }

    pub fn is_padded(&self) -> bool {
        self.counts.iter().any(|&c| c != self.max_len)
    }

    /// Flat row index of slot `t` of item `b`.
    pub fn flat(&self, b: usize, t: usize) -> usize {
        b * self.max_len + t
    }
}
