//! Flat parameter storage. Every tensor lives in one contiguous `f64`
//! buffer so the optimizer, gradient checks and checkpoints can treat the
//! model as a single vector.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

/// Optimizer group a tensor belongs to; each group has its own learning rate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamGroup {
    Encoder,
    Decoder,
    Adaptor,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Init {
    /// Normal with the given standard deviation, truncated at two sigma.
    TruncNormal(f64),
    Zeros,
    Ones,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub group: ParamGroup,
    #[serde(skip, default = "default_init")]
    pub init: Init,
}

fn default_init() -> Init {
    Init::Zeros
}

impl TensorSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// A handle to one tensor inside the flat buffer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Slot {
    pub off: usize,
    pub len: usize,
}

impl Slot {
    #[inline]
    pub fn of<'a>(&self, buf: &'a [f64]) -> &'a [f64] {
        &buf[self.off..self.off + self.len]
    }

    #[inline]
    pub fn of_mut<'a>(&self, buf: &'a mut [f64]) -> &'a mut [f64] {
        &mut buf[self.off..self.off + self.len]
    }

    /// Row `r` of a row-major matrix with `cols` columns.
    #[inline]
    pub fn row<'a>(&self, buf: &'a [f64], r: usize, cols: usize) -> &'a [f64] {
        let s = self.off + r * cols;
        &buf[s..s + cols]
    }

    #[inline]
    pub fn row_mut<'a>(&self, buf: &'a mut [f64], r: usize, cols: usize) -> &'a mut [f64] {
        let s = self.off + r * cols;
        &mut buf[s..s + cols]
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    pub data: Vec<f64>,
    pub specs: Vec<TensorSpec>,
}

impl ParamStore {
    pub fn alloc(&mut self, name: impl Into<String>, shape: &[usize], group: ParamGroup, init: Init) -> Slot {
        let offset = self.data.len();
        let len: usize = shape.iter().product();
        self.data.resize(offset + len, 0.0);
        self.specs.push(TensorSpec {
            name: name.into(),
            shape: shape.to_vec(),
            offset,
            group,
            init,
        });
        Slot { off: offset, len }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn spec(&self, name: &str) -> Option<&TensorSpec> {
        self.specs.iter().find(|s| s.name == name)
    }

    pub fn tensor(&self, name: &str) -> Option<&[f64]> {
        self.spec(name).map(|s| &self.data[s.range()])
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        let r = self.spec(name)?.range();
        Some(&mut self.data[r])
    }

    /// Fills every tensor according to its `Init`, in allocation order.
    pub fn initialize(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for spec in &self.specs {
            let dst = &mut self.data[spec.offset..spec.offset + spec.len()];
            match spec.init {
                Init::Zeros => dst.fill(0.0),
                Init::Ones => dst.fill(1.0),
                Init::TruncNormal(sigma) => {
                    for v in dst {
                        *v = loop {
                            let z: f64 = rng.sample(StandardNormal);
                            if z.abs() <= 2.0 {
                                break z * sigma;
                            }
                        };
                    }
                }
            }
        }
    }

    /// Overwrites every parameter with N(0, scale²) noise; LayerNorm gains
    /// are centered on 1. Used to probe the model away from its initial point.
    pub fn randomize(&mut self, seed: u64, scale: f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for spec in &self.specs {
            let center = if spec.init == Init::Ones { 1.0 } else { 0.0 };
            for v in &mut self.data[spec.offset..spec.offset + spec.len()] {
                *v = center + scale * rng.sample::<f64, _>(StandardNormal);
            }
        }
    }

    pub fn group_of(&self, index: usize) -> ParamGroup {
        self.specs
            .iter()
            .find(|s| s.range().contains(&index))
            .map(|s| s.group)
            .expect("index inside the buffer")
    }
}
