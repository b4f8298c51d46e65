//! Uniform parameter initializers: the Glorot baseline and the
//! Lipschitz-constrained variants for linear maps and embeddings.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// One initializer together with the dimensions that fix its bound.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum InitScheme {
    /// `U(-sqrt(6 / (isize + osize)), +sqrt(6 / (isize + osize)))`
    Glorot { isize: usize, osize: usize },
    /// `U(-sqrt(1 / isize), +sqrt(1 / isize))`
    LipschitzLinear { isize: usize, osize: usize },
    /// `U(-sqrt(2 / (esize + vsize)), +sqrt(2 / (esize + vsize)))`
    LipschitzEmbedding { vsize: usize, esize: usize },
}

impl InitScheme {
    /// Half-width of the uniform support.
    pub fn bound(&self) -> f64 {
        match *self {
            InitScheme::Glorot { isize, osize } => (6.0 / (isize + osize) as f64).sqrt(),
            InitScheme::LipschitzLinear { isize, .. } => (1.0 / isize as f64).sqrt(),
            InitScheme::LipschitzEmbedding { vsize, esize } => (2.0 / (esize + vsize) as f64).sqrt(),
        }
    }

    /// Shape of the sampled matrix: `[isize, osize]` or `[vsize, esize]`.
    pub fn shape(&self) -> [usize; 2] {
        match *self {
            InitScheme::Glorot { isize, osize } | InitScheme::LipschitzLinear { isize, osize } => [isize, osize],
            InitScheme::LipschitzEmbedding { vsize, esize } => [vsize, esize],
        }
    }

    pub fn sample(&self, rng: &mut Rng) -> Result<Tensor> {
        let [rows, cols] = self.shape();
        if rows == 0 || cols == 0 {
            return Err(Error::contract(format!(
                "initializer dimensions must be >= 1, got {rows}x{cols}"
            )));
        }
        let bound = self.bound();
        let data = (0..rows * cols).map(|_| rng.symmetric(bound)).collect();
        Tensor::new(vec![rows, cols], data)
    }
}

pub fn glorot_uniform(isize: usize, osize: usize, rng: &mut Rng) -> Result<Tensor> {
    InitScheme::Glorot { isize, osize }.sample(rng)
}

pub fn lipschitz_linear_uniform(isize: usize, osize: usize, rng: &mut Rng) -> Result<Tensor> {
    InitScheme::LipschitzLinear { isize, osize }.sample(rng)
}

pub fn lipschitz_embedding_uniform(vsize: usize, esize: usize, rng: &mut Rng) -> Result<Tensor> {
    InitScheme::LipschitzEmbedding { vsize, esize }.sample(rng)
}

/// Which bound family a whole model is initialized from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitFamily {
    Glorot,
    Lipschitz,
}

impl InitFamily {
    pub fn name(self) -> &'static str {
        match self {
            InitFamily::Glorot => "glorot",
            InitFamily::Lipschitz => "lipschitz",
        }
    }
}

impl std::str::FromStr for InitFamily {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "glorot" => Ok(InitFamily::Glorot),
            "lipschitz" => Ok(InitFamily::Lipschitz),
            other => Err(format!("unknown init family `{other}` (expected glorot|lipschitz)")),
        }
    }
}

/// Role of a parameter, which decides how it is initialized.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamRole {
    /// Weight of `x -> x W` with `W: [isize, osize]`.
    Linear { isize: usize, osize: usize },
    /// Lookup table `[vsize, esize]`.
    Embedding { vsize: usize, esize: usize },
    /// Additive bias of a linear map.
    Bias(usize),
    LnGain(usize),
    LnBias(usize),
}

impl ParamRole {
    pub fn shape(&self) -> Vec<usize> {
        match *self {
            ParamRole::Linear { isize, osize } => vec![isize, osize],
            ParamRole::Embedding { vsize, esize } => vec![vsize, esize],
            ParamRole::Bias(n) | ParamRole::LnGain(n) | ParamRole::LnBias(n) => vec![n],
        }
    }

    /// The uniform scheme used for this role, if it is randomly initialized.
    pub fn scheme(&self, family: InitFamily) -> Option<InitScheme> {
        match (*self, family) {
            (ParamRole::Linear { isize, osize }, InitFamily::Glorot) => Some(InitScheme::Glorot { isize, osize }),
            (ParamRole::Linear { isize, osize }, InitFamily::Lipschitz) => {
                Some(InitScheme::LipschitzLinear { isize, osize })
            }
            (ParamRole::Embedding { vsize, esize }, InitFamily::Glorot) => Some(InitScheme::Glorot {
                isize: vsize,
                osize: esize,
            }),
            (ParamRole::Embedding { vsize, esize }, InitFamily::Lipschitz) => {
                Some(InitScheme::LipschitzEmbedding { vsize, esize })
            }
            _ => None,
        }
    }
}

/// Named trainable tensors in a fixed order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    roles: Vec<ParamRole>,
    tensors: Vec<Tensor>,
}

/// Index of a parameter inside its [`ParamSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

impl ParamSet {
    pub fn push(&mut self, name: impl Into<String>, role: ParamRole, tensor: Tensor) -> ParamId {
        self.names.push(name.into());
        self.roles.push(role);
        self.tensors.push(tensor.with_grad());
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn role(&self, id: ParamId) -> ParamRole {
        self.roles[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn zero_grads(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }
}

/// Initializes every described parameter. Random weights draw from a stream
/// derived from the parameter's name; LN gains are ones and all biases zeros.
pub fn init_model_params(layout: &[(String, ParamRole)], family: InitFamily, rng: &Rng) -> Result<ParamSet> {
    let mut set = ParamSet::default();
    for (name, role) in layout {
        let tensor = match role.scheme(family) {
            Some(scheme) => scheme.sample(&mut rng.split(name))?,
            None => {
                let value = if matches!(role, ParamRole::LnGain(_)) { 1.0 } else { 0.0 };
                let shape = role.shape();
                if shape.contains(&0) {
                    return Err(Error::contract(format!("parameter `{name}` has a zero dimension")));
                }
                Tensor::full(&shape, value)
            }
        };
        set.push(name.clone(), *role, tensor);
    }
    Ok(set)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn closed_form_bounds() {
        assert!(close(InitScheme::Glorot { isize: 512, osize: 512 }.bound(), 0.076_546_6, 5e-8));
        assert!(close(InitScheme::Glorot { isize: 1, osize: 2 }.bound(), 1.414_213_6, 5e-8));
        assert!(close(InitScheme::LipschitzLinear { isize: 512, osize: 7 }.bound(), 0.044_194_2, 5e-8));
        assert_eq!(InitScheme::LipschitzLinear { isize: 1, osize: 1 }.bound(), 1.0);
        assert!(close(
            InitScheme::LipschitzEmbedding { vsize: 32768, esize: 512 }.bound(),
            0.007_752_2,
            5e-8
        ));
        assert_eq!(InitScheme::LipschitzEmbedding { vsize: 1, esize: 1 }.bound(), 1.0);
    }

    #[test]
    fn zero_dimension_is_a_contract_error() {
        let mut rng = Rng::new(0);
        assert!(matches!(glorot_uniform(0, 3, &mut rng), Err(Error::Contract(_))));
        assert!(matches!(lipschitz_linear_uniform(3, 0, &mut rng), Err(Error::Contract(_))));
        assert!(matches!(lipschitz_embedding_uniform(0, 0, &mut rng), Err(Error::Contract(_))));
    }

    #[test]
    fn embedding_samples_strictly_inside_support() {
        let mut rng = Rng::new(4);
        let t = lipschitz_embedding_uniform(100, 16, &mut rng).unwrap();
        let b = InitScheme::LipschitzEmbedding { vsize: 100, esize: 16 }.bound();
        assert_eq!(t.shape, vec![100, 16]);
        assert!(t.data.iter().all(|v| v.abs() < b));
    }

    #[test]
    fn glorot_512_sample_statistics() {
        let mut rng = Rng::new(21);
        let t = glorot_uniform(512, 512, &mut rng).unwrap();
        let bound = (6.0f64 / 1024.0).sqrt();
        assert!(t.data.iter().all(|v| v.abs() <= bound));
        let (_, var) = crate::tensor::mean_var(&t.data);
        let target = bound / 3f64.sqrt();
        assert!((var.sqrt() - target).abs() / target < 0.02);
    }

    #[test]
    fn lipschitz_512_sample_std() {
        let mut rng = Rng::new(22);
        let t = lipschitz_linear_uniform(512, 512, &mut rng).unwrap();
        let (_, var) = crate::tensor::mean_var(&t.data);
        assert!((var.sqrt() - 0.025_515_6).abs() / 0.025_515_6 < 0.02);
    }

    #[test]
    fn model_params_gains_ones_biases_zeros_and_deterministic() {
        let layout = vec![
            ("emb".to_string(), ParamRole::Embedding { vsize: 10, esize: 4 }),
            ("w".to_string(), ParamRole::Linear { isize: 4, osize: 6 }),
            ("b".to_string(), ParamRole::Bias(6)),
            ("ln.w".to_string(), ParamRole::LnGain(4)),
            ("ln.b".to_string(), ParamRole::LnBias(4)),
        ];
        let rng = Rng::new(99);
        let a = init_model_params(&layout, InitFamily::Lipschitz, &rng).unwrap();
        let b = init_model_params(&layout, InitFamily::Lipschitz, &rng).unwrap();
        assert_eq!(a, b);
        let get = |n: &str| a.get(a.find(n).unwrap());
        assert!(get("ln.w").data.iter().all(|&v| v == 1.0));
        assert!(get("ln.b").data.iter().all(|&v| v == 0.0));
        assert!(get("b").data.iter().all(|&v| v == 0.0));
        assert!(get("w").data.iter().all(|v| v.abs() <= 0.5));
        assert!(get("emb").data.iter().all(|v| v.abs() <= (2.0f64 / 14.0).sqrt()));
    }

    #[test]
    fn param_streams_do_not_depend_on_layout_order() {
        let w = ("w".to_string(), ParamRole::Linear { isize: 4, osize: 6 });
        let v = ("v".to_string(), ParamRole::Linear { isize: 3, osize: 3 });
        let rng = Rng::new(5);
        let a = init_model_params(&[w.clone(), v.clone()], InitFamily::Glorot, &rng).unwrap();
        let b = init_model_params(&[v, w], InitFamily::Glorot, &rng).unwrap();
        assert_eq!(a.get(a.find("w").unwrap()).data, b.get(b.find("w").unwrap()).data);
    }
}
