use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::layers::{LayerVars, ModuleVars};
use super::{ModelConfig, ModelError, Result, Variant};
use crate::tensor::{Scalar, Tape, Tensor, Var};

/// Named parameter set of one model, ordered by name.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameters<S> {
    map: BTreeMap<String, Tensor<S>>,
}

/// Parameter shapes with the fan-in used for LeCun initialization
/// (`None` = zero init).
fn layout(config: &ModelConfig) -> Vec<(String, Vec<usize>, Option<usize>)> {
    let d = config.d_model;
    let hidden = config.mlp_hidden_dim();
    let mut out = vec![
        ("embed".to_string(), vec![config.vocab_size, d], Some(d)),
        ("head".to_string(), vec![d, config.vocab_size], Some(d)),
    ];
    let prefixes: &[&str] = match config.variant {
        Variant::Hrm => {
            out.push(("z_l_init".to_string(), vec![d], Some(d)));
            &["h.", "l."]
        }
        Variant::Standard | Variant::Looped => &[""],
    };
    for prefix in prefixes {
        for i in 0..config.layers_per_module {
            let base = format!("{prefix}layers.{i}");
            for w in ["q", "k", "v", "o", "gate"] {
                out.push((format!("{base}.attn.{w}"), vec![d, d], Some(d)));
            }
            out.push((format!("{base}.attn.gate_bias"), vec![d], None));
            out.push((format!("{base}.mlp.a"), vec![d, hidden], Some(d)));
            out.push((format!("{base}.mlp.b"), vec![d, hidden], Some(d)));
            out.push((format!("{base}.mlp.c"), vec![hidden, d], Some(hidden)));
        }
    }
    out.sort_by(|a, b| a.0.cmp(&b.0));
    out
}

impl ModelConfig {
    /// Parameter count without instantiating the weights.
    pub fn num_parameters(&self) -> usize {
        layout(self).iter().map(|(_, shape, _)| shape.iter().product::<usize>()).sum()
    }

    /// Parameters outside the token embedding and output head.
    pub fn num_core_parameters(&self) -> usize {
        layout(self)
            .iter()
            .filter(|(n, _, _)| n != "embed" && n != "head")
            .map(|(_, shape, _)| shape.iter().product::<usize>())
            .sum()
    }
}

impl<S: Scalar> Parameters<S> {
    /// LeCun normal initialization: zero mean, variance 1/fan_in.
    pub fn init(config: &ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut map = BTreeMap::new();
        for (name, shape, fan_in) in layout(config) {
            let n: usize = shape.iter().product();
            let data = match fan_in {
                Some(f) => {
                    let normal = Normal::new(0.0, (1.0 / f as f64).sqrt()).unwrap();
                    (0..n).map(|_| S::lit(normal.sample(&mut rng))).collect()
                }
                None => vec![S::zero(); n],
            };
            map.insert(name, Tensor::new(shape, data).expect("layout shapes are valid"));
        }
        Self { map }
    }

    /// Zero-filled parameters with the layout of `config`.
    pub fn zeros(config: &ModelConfig) -> Self {
        let map = layout(config)
            .into_iter()
            .map(|(name, shape, _)| (name, Tensor::zeros(&shape)))
            .collect();
        Self { map }
    }

    pub fn from_map(map: BTreeMap<String, Tensor<S>>) -> Self {
        Self { map }
    }

    /// Checks that names and shapes match the layout `config` expects.
    pub fn check_layout(&self, config: &ModelConfig) -> Result<()> {
        let expected = layout(config);
        if expected.len() != self.map.len() {
            return Err(ModelError::Checkpoint(format!(
                "expected {} parameters, found {}",
                expected.len(),
                self.map.len()
            )));
        }
        for (name, shape, _) in expected {
            let t = self.map.get(&name).ok_or_else(|| ModelError::MissingParam(name.clone()))?;
            if t.shape() != shape.as_slice() {
                return Err(ModelError::Checkpoint(format!(
                    "{name}: shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<S>> {
        self.map.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<S>> {
        self.map.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<S>)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<S>)> {
        self.map.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.map.values().map(|t| t.len()).sum()
    }

    /// Elements outside the token embedding and output head.
    pub fn num_core_elements(&self) -> usize {
        self.map
            .iter()
            .filter(|(n, _)| n.as_str() != "embed" && n.as_str() != "head")
            .map(|(_, t)| t.len())
            .sum()
    }

    pub fn cast<T: Scalar>(&self) -> Parameters<T> {
        Parameters {
            map: self.map.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    /// Registers every parameter as a tape leaf. `trainable` decides which
    /// ones require gradients.
    pub fn bind(&self, tape: &mut Tape<S>, trainable: impl Fn(&str) -> bool) -> Result<ParamVars> {
        let mut vars = BTreeMap::new();
        for (name, value) in &self.map {
            let v = tape.leaf(value.clone(), trainable(name))?;
            vars.insert(name.clone(), v);
        }
        Ok(ParamVars { vars })
    }
}

/// Tape handles of a bound parameter set.
#[derive(Clone, Debug)]
pub struct ParamVars {
    vars: BTreeMap<String, Var>,
}

impl ParamVars {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| ModelError::MissingParam(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn layer(&self, prefix: &str, i: usize) -> Result<LayerVars> {
        let base = format!("{prefix}layers.{i}");
        let g = |s: &str| self.get(&format!("{base}.{s}"));
        Ok(LayerVars {
            q: g("attn.q")?,
            k: g("attn.k")?,
            v: g("attn.v")?,
            o: g("attn.o")?,
            gate: g("attn.gate")?,
            gate_bias: g("attn.gate_bias")?,
            mlp_a: g("mlp.a")?,
            mlp_b: g("mlp.b")?,
            mlp_c: g("mlp.c")?,
        })
    }

    pub fn module(&self, prefix: &str, layers: usize) -> Result<ModuleVars> {
        Ok(ModuleVars {
            layers: (0..layers).map(|i| self.layer(prefix, i)).collect::<Result<_>>()?,
        })
    }
}
