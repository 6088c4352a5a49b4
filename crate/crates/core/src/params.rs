//! Named parameter tensors and their binding to a [`Graph`].

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// How a parameter is initialized.
#[derive(Clone, Debug, PartialEq)]
pub enum Init {
    /// `uniform(-a, a)`, `a = 1 / sqrt(fan_in)`.
    FanIn(usize),
    /// As `FanIn`, with weight slots whose tap bit is `false` set to zero.
    /// The mask is indexed by the innermost `mask.len()` elements.
    MaskedFanIn(usize, Vec<bool>),
    Const(f32),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub dims: [usize; 4],
    pub init: Init,
}

impl ParamSpec {
    pub fn new(name: impl Into<String>, dims: [usize; 4], init: Init) -> Self {
        ParamSpec { name: name.into(), dims, init }
    }
}

/// Parameters keyed by unique dotted names, iterated in name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Initializes every spec from one seeded stream, in spec order.
    pub fn init(specs: &[ParamSpec], seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        for s in specs {
            let n: usize = s.dims.iter().product();
            let data: Vec<f32> = match &s.init {
                Init::Const(v) => vec![*v; n],
                Init::FanIn(fan) => {
                    let a = 1.0 / (*fan.max(&1) as f64).sqrt();
                    (0..n).map(|_| rng.random_range(-a..a) as f32).collect()
                }
                Init::MaskedFanIn(fan, mask) => {
                    let a = 1.0 / (*fan.max(&1) as f64).sqrt();
                    (0..n)
                        .map(|i| {
                            let v = rng.random_range(-a..a) as f32;
                            if mask[i % mask.len()] {
                                v
                            } else {
                                0.0
                            }
                        })
                        .collect()
                }
            };
            store.insert(&s.name, Tensor::new(s.dims, data)?)?;
        }
        Ok(store)
    }

    pub fn insert(&mut self, name: &str, t: Tensor) -> Result<()> {
        if self.entries.insert(name.to_string(), t).is_some() {
            return Err(Error::invalid(format!("duplicate parameter '{name}'")));
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.entries.get(name).ok_or_else(|| Error::invalid(format!("unknown parameter '{name}'")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.entries.get_mut(name).ok_or_else(|| Error::invalid(format!("unknown parameter '{name}'")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.entries.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total element count.
    pub fn count(&self) -> usize {
        self.entries.values().map(|t| t.numel()).sum()
    }

    /// Order-sensitive FNV-1a hash of names and value bits.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut feed = |bytes: &[u8]| {
            for b in bytes {
                h ^= *b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        };
        for (k, t) in &self.entries {
            feed(k.as_bytes());
            for v in t.data() {
                feed(&v.to_bits().to_le_bytes());
            }
        }
        h
    }

    /// Places every parameter on `g`, as gradient leaves if `trainable`.
    pub fn bind<T: Scalar>(&self, g: &mut Graph<T>, trainable: bool) -> Bound {
        let vars = self
            .entries
            .iter()
            .map(|(k, t)| {
                let c = t.cast::<T>();
                (k.clone(), if trainable { g.param(c) } else { g.constant(c) })
            })
            .collect();
        Bound { vars }
    }
}

/// Parameter names resolved to graph nodes.
#[derive(Clone, Debug, Default)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars.get(name).copied().ok_or_else(|| Error::invalid(format!("parameter '{name}' not bound")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    /// Overrides one binding (diagnostics that swap a parameter for a probe).
    pub fn set(&mut self, name: &str, v: Var) {
        self.vars.insert(name.to_string(), v);
    }
}
