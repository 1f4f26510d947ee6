use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{Graph, RunningStats, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamKind {
    ConvWeight,
    Bias,
    BnGamma,
    BnBeta,
}

impl ParamKind {
    pub fn name(self) -> &'static str {
        match self {
            ParamKind::ConvWeight => "conv_weight",
            ParamKind::Bias => "bias",
            ParamKind::BnGamma => "bn_gamma",
            ParamKind::BnBeta => "bn_beta",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        [
            ParamKind::ConvWeight,
            ParamKind::Bias,
            ParamKind::BnGamma,
            ParamKind::BnBeta,
        ]
        .into_iter()
        .find(|k| k.name() == s)
    }
}

/// Index of a parameter inside its [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

/// Index of a batch-norm running-statistics slot.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct StatsId(pub(crate) usize);

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub kind: ParamKind,
    pub value: Tensor,
}

/// Ordered registry of every learnable tensor plus BN running statistics.
///
/// Registration order is the construction order of the model and is stable
/// for a given config; names are unique.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
    index: HashMap<String, usize>,
    stats: Vec<(String, RunningStats)>,
}

impl ParamStore {
    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.index.get(name).map(|&i| &self.params[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.index.get(name).map(|&i| &mut self.params[i])
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn by_id(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn running_stats(&self) -> &[(String, RunningStats)] {
        &self.stats
    }

    pub fn running_stats_mut(&mut self) -> &mut [(String, RunningStats)] {
        &mut self.stats
    }

    pub(crate) fn stats(&self, id: StatsId) -> &RunningStats {
        &self.stats[id.0].1
    }

    pub(crate) fn stats_mut(&mut self, id: StatsId) -> &mut RunningStats {
        &mut self.stats[id.0].1
    }

    /// Number of scalar values held by parameters of `kind`.
    pub fn numel_of(&self, kind: ParamKind) -> u64 {
        self.params
            .iter()
            .filter(|p| p.kind == kind)
            .map(|p| p.value.numel() as u64)
            .sum()
    }

    pub fn numel(&self) -> u64 {
        self.params.iter().map(|p| p.value.numel() as u64).sum()
    }

    /// Registers every parameter as a gradient-tracking leaf of `g`.
    pub fn bind(&self, g: &mut Graph) -> Bound {
        Bound {
            vars: self.params.iter().map(|p| g.param(p.value.detached())).collect(),
        }
    }

    /// Registers every parameter as a constant (no gradient) leaf of `g`.
    pub fn bind_frozen(&self, g: &mut Graph) -> Bound {
        Bound {
            vars: self
                .params
                .iter()
                .map(|p| g.constant(p.value.detached()))
                .collect(),
        }
    }

    fn push(&mut self, name: String, kind: ParamKind, value: Tensor) -> Result<ParamId> {
        if self.index.contains_key(&name) {
            return Err(Error::Contract(format!("duplicate parameter name {name:?}")));
        }
        let id = self.params.len();
        self.index.insert(name.clone(), id);
        self.params.push(Param { name, kind, value });
        Ok(ParamId(id))
    }
}

/// Graph handles for one forward pass, parallel to the store's order.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Routes parameter `id` through a different node, e.g. a probe leaf.
    pub fn replace(&mut self, id: ParamId, var: Var) {
        self.vars[id.0] = var;
    }
}

/// FNV-1a over the seed bytes followed by the name bytes.
fn name_seed(seed: u64, name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in seed.to_le_bytes().iter().chain(name.as_bytes()) {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Allocates parameters into a store. Each conv weight draws from its own
/// stream keyed by (seed, name), so adding a layer never perturbs the others.
pub(crate) struct Allocator {
    pub store: ParamStore,
    seed: u64,
}

impl Allocator {
    pub fn new(seed: u64) -> Self {
        Allocator {
            store: ParamStore::default(),
            seed,
        }
    }

    /// He-normal `[cout, cin, k, k]` kernel.
    pub fn conv_weight(&mut self, name: String, cout: usize, cin: usize, k: usize) -> Result<ParamId> {
        let fan_in = (cin * k * k) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt())
            .map_err(|e| Error::Config(format!("{name}: {e}")))?;
        let mut rng = ChaCha8Rng::seed_from_u64(name_seed(self.seed, &name));
        let t = Tensor::from_fn([cout, cin, k, k], |_| normal.sample(&mut rng));
        self.store.push(name, ParamKind::ConvWeight, t)
    }

    pub fn filled(&mut self, name: String, kind: ParamKind, len: usize, value: f64) -> Result<ParamId> {
        self.store.push(name, kind, Tensor::full([len], value))
    }

    pub fn running_stats(&mut self, name: String, channels: usize) -> StatsId {
        self.store.stats.push((name, RunningStats::new(channels)));
        StatsId(self.store.stats.len() - 1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weight_streams_depend_on_name_only() {
        let mut a = Allocator::new(5);
        a.conv_weight("x".into(), 2, 2, 3).unwrap();
        a.conv_weight("y".into(), 2, 2, 3).unwrap();
        let mut b = Allocator::new(5);
        b.conv_weight("y".into(), 2, 2, 3).unwrap();
        assert!(a.store.get("y").unwrap().value.bit_eq(&b.store.get("y").unwrap().value));
        assert!(!a.store.get("x").unwrap().value.bit_eq(&a.store.get("y").unwrap().value));
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut a = Allocator::new(0);
        a.filled("b".into(), ParamKind::Bias, 3, 0.0).unwrap();
        assert!(matches!(
            a.filled("b".into(), ParamKind::Bias, 3, 0.0),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn he_scale_is_plausible() {
        let mut a = Allocator::new(1);
        a.conv_weight("w".into(), 64, 32, 3).unwrap();
        let d = a.store.get("w").unwrap().value.data();
        let var = d.iter().map(|v| v * v).sum::<f64>() / d.len() as f64;
        let target = 2.0 / (32.0 * 9.0);
        assert!((var / target - 1.0).abs() < 0.1, "{var} vs {target}");
    }
}
