//! Search space, configuration chromosomes, the memory model and Pareto
//! dominance over (performance, memory).

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_BITS: [u32; 3] = [2, 4, 8];
pub const DEFAULT_RANKS: [u32; 8] = [2, 4, 6, 8, 10, 12, 14, 16];

/// Admissible bit-widths and adapter ranks. Both sets are kept strictly
/// ascending.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchSpace {
    bits: Vec<u32>,
    ranks: Vec<u32>,
}

impl Default for SearchSpace {
    fn default() -> Self {
        Self {
            bits: DEFAULT_BITS.to_vec(),
            ranks: DEFAULT_RANKS.to_vec(),
        }
    }
}

fn check_axis(name: &str, values: &[u32]) -> Result<()> {
    if values.is_empty() {
        return Err(Error::InvalidSpace(format!("{name} set is empty")));
    }
    if values.contains(&0) {
        return Err(Error::InvalidSpace(format!("{name} set contains 0")));
    }
    if values.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidSpace(format!(
            "{name} set must be strictly ascending: {values:?}"
        )));
    }
    Ok(())
}

impl SearchSpace {
    pub fn new(bits: Vec<u32>, ranks: Vec<u32>) -> Result<Self> {
        check_axis("bits", &bits)?;
        check_axis("ranks", &ranks)?;
        Ok(Self { bits, ranks })
    }

    pub fn bits(&self) -> &[u32] {
        &self.bits
    }

    pub fn ranks(&self) -> &[u32] {
        &self.ranks
    }

    pub fn min_bit(&self) -> u32 {
        self.bits[0]
    }

    pub fn max_bit(&self) -> u32 {
        *self.bits.last().unwrap()
    }

    pub fn min_rank(&self) -> u32 {
        self.ranks[0]
    }

    pub fn max_rank(&self) -> u32 {
        *self.ranks.last().unwrap()
    }

    /// Lower median of each axis.
    pub fn median_layer(&self) -> LayerConfig {
        LayerConfig::new(
            self.bits[(self.bits.len() - 1) / 2],
            self.ranks[(self.ranks.len() - 1) / 2],
        )
    }

    pub fn bit_index(&self, bit: u32) -> Option<usize> {
        self.bits.binary_search(&bit).ok()
    }

    pub fn rank_index(&self, rank: u32) -> Option<usize> {
        self.ranks.binary_search(&rank).ok()
    }

    pub fn uniform(&self, layers: usize, layer: LayerConfig) -> ModelConfig {
        ModelConfig::new(vec![layer; layers])
    }

    pub fn min_config(&self, layers: usize) -> ModelConfig {
        self.uniform(layers, LayerConfig::new(self.min_bit(), self.min_rank()))
    }

    pub fn max_config(&self, layers: usize) -> ModelConfig {
        self.uniform(layers, LayerConfig::new(self.max_bit(), self.max_rank()))
    }

    /// Checks that every layer of `config` lies in this space.
    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        if config.is_empty() {
            return Err(Error::InvalidParameter("configuration has no layers".into()));
        }
        for (layer, lc) in config.layers().iter().enumerate() {
            if self.bit_index(lc.bit).is_none() {
                return Err(Error::OutOfSpace {
                    layer,
                    axis: "bits",
                    value: lc.bit,
                });
            }
            if self.rank_index(lc.rank).is_none() {
                return Err(Error::OutOfSpace {
                    layer,
                    axis: "ranks",
                    value: lc.rank,
                });
            }
        }
        Ok(())
    }
}

/// One gene: the (bit-width, rank) tuple of a single layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct LayerConfig {
    pub bit: u32,
    pub rank: u32,
}

impl LayerConfig {
    pub const fn new(bit: u32, rank: u32) -> Self {
        Self { bit, rank }
    }
}

impl fmt::Display for LayerConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.bit, self.rank)
    }
}

/// A full-model chromosome.
///
/// Serializes as the wire-protocol config object
/// `{"bits": [...], "ranks": [...]}`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "ConfigObject", try_from = "ConfigObject")]
pub struct ModelConfig {
    layers: Vec<LayerConfig>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigObject {
    pub bits: Vec<u32>,
    pub ranks: Vec<u32>,
}

impl From<ModelConfig> for ConfigObject {
    fn from(c: ModelConfig) -> Self {
        Self {
            bits: c.bits(),
            ranks: c.ranks(),
        }
    }
}

impl TryFrom<ConfigObject> for ModelConfig {
    type Error = String;

    fn try_from(o: ConfigObject) -> Result<Self, String> {
        if o.bits.len() != o.ranks.len() {
            return Err(format!(
                "bits has {} entries but ranks has {}",
                o.bits.len(),
                o.ranks.len()
            ));
        }
        Ok(ModelConfig::new(
            o.bits
                .into_iter()
                .zip(o.ranks)
                .map(|(bit, rank)| LayerConfig { bit, rank })
                .collect(),
        ))
    }
}

impl ModelConfig {
    pub fn new(layers: Vec<LayerConfig>) -> Self {
        Self { layers }
    }

    pub fn layers(&self) -> &[LayerConfig] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [LayerConfig] {
        &mut self.layers
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn bits(&self) -> Vec<u32> {
        self.layers.iter().map(|l| l.bit).collect()
    }

    pub fn ranks(&self) -> Vec<u32> {
        self.layers.iter().map(|l| l.rank).collect()
    }
}

impl fmt::Display for ModelConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, l) in self.layers.iter().enumerate() {
            if i > 0 {
                f.write_str(" ")?;
            }
            write!(f, "{l}")?;
        }
        Ok(())
    }
}

/// Sizes needed to price one layer in bytes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerGeometry {
    pub frozen_params: u64,
    pub adapter_in_dims: Vec<u64>,
    pub adapter_out_dims: Vec<u64>,
    /// Quantizer metadata and other per-layer constants.
    #[serde(default, skip_serializing_if = "is_zero")]
    pub fixed_overhead_bytes: u64,
}

fn is_zero(v: &u64) -> bool {
    *v == 0
}

fn default_adapter_bytes() -> u64 {
    2
}

impl LayerGeometry {
    pub fn new(frozen_params: u64, adapters: &[(u64, u64)]) -> Self {
        Self {
            frozen_params,
            adapter_in_dims: adapters.iter().map(|a| a.0).collect(),
            adapter_out_dims: adapters.iter().map(|a| a.1).collect(),
            fixed_overhead_bytes: 0,
        }
    }

    /// Σ (in + out) over adapted matrices: adapter parameters per unit rank.
    pub fn adapter_width(&self) -> u64 {
        self.adapter_in_dims
            .iter()
            .zip(&self.adapter_out_dims)
            .map(|(i, o)| i + o)
            .sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.adapter_in_dims.len() != self.adapter_out_dims.len() {
            return Err(Error::InvalidGeometry(format!(
                "{} adapter input dims but {} output dims",
                self.adapter_in_dims.len(),
                self.adapter_out_dims.len()
            )));
        }
        if self
            .adapter_in_dims
            .iter()
            .chain(&self.adapter_out_dims)
            .any(|&d| d == 0)
        {
            return Err(Error::InvalidGeometry(
                "adapter dimensions must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Bytes for this layer at the given gene; `None` on overflow.
    pub fn bytes(&self, lc: LayerConfig, adapter_bytes_per_param: u64) -> Option<u64> {
        let frozen_bits = self.frozen_params.checked_mul(lc.bit as u64)?;
        let frozen = frozen_bits.div_ceil(8);
        let adapter = self
            .adapter_width()
            .checked_mul(lc.rank as u64)?
            .checked_mul(adapter_bytes_per_param)?;
        frozen
            .checked_add(adapter)?
            .checked_add(self.fixed_overhead_bytes)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelGeometry {
    pub layers: Vec<LayerGeometry>,
    #[serde(default = "default_adapter_bytes")]
    pub adapter_bytes_per_param: u64,
}

impl ModelGeometry {
    pub fn new(layers: Vec<LayerGeometry>) -> Self {
        Self {
            layers,
            adapter_bytes_per_param: default_adapter_bytes(),
        }
    }

    /// `layers` identical square layers of width `dim` with `matrices`
    /// adapted projections each.
    pub fn uniform_square(layers: usize, dim: u64, matrices: usize) -> Self {
        let layer = LayerGeometry::new(dim * dim * matrices as u64, &vec![(dim, dim); matrices]);
        Self::new(vec![layer; layers])
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn total_frozen_params(&self) -> u64 {
        self.layers.iter().map(|l| l.frozen_params).sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::InvalidGeometry("geometry has no layers".into()));
        }
        if self.adapter_bytes_per_param == 0 {
            return Err(Error::InvalidGeometry(
                "adapter_bytes_per_param must be positive".into(),
            ));
        }
        for (i, l) in self.layers.iter().enumerate() {
            l.validate()
                .map_err(|e| Error::InvalidGeometry(format!("layer {i}: {e}")))?;
        }
        Ok(())
    }

    /// Parses and validates a geometry document (JSON).
    pub fn from_json_str(s: &str) -> Result<Self> {
        let geom: ModelGeometry = serde_json::from_str(s)?;
        geom.validate()?;
        Ok(geom)
    }

    fn check_len(&self, config: &ModelConfig) -> Result<()> {
        if config.len() != self.len() {
            return Err(Error::LengthMismatch {
                config: config.len(),
                geometry: self.len(),
            });
        }
        Ok(())
    }

    /// Bytes per layer; the sum is [`memory_footprint`].
    pub fn layer_bytes(&self, config: &ModelConfig) -> Result<Vec<u64>> {
        self.check_len(config)?;
        config
            .layers()
            .iter()
            .zip(&self.layers)
            .map(|(lc, g)| {
                g.bytes(*lc, self.adapter_bytes_per_param)
                    .ok_or_else(|| Error::InvalidGeometry("byte count overflows u64".into()))
            })
            .collect()
    }
}

/// Total bytes of `config`: frozen weights at their bit-width (rounded up per
/// layer) plus adapters at `adapter_bytes_per_param`.
pub fn memory_footprint(config: &ModelConfig, geom: &ModelGeometry) -> Result<u64> {
    geom.layer_bytes(config)?
        .into_iter()
        .try_fold(0u64, |acc, b| acc.checked_add(b))
        .ok_or_else(|| Error::InvalidGeometry("byte count overflows u64".into()))
}

/// Parameter-weighted mean bit-width.
pub fn average_bit(config: &ModelConfig, geom: &ModelGeometry) -> Result<f64> {
    geom.check_len(config)?;
    let total = geom.total_frozen_params();
    if total == 0 {
        return Err(Error::UndefinedAverage);
    }
    let weighted: f64 = config
        .layers()
        .iter()
        .zip(&geom.layers)
        .map(|(lc, g)| lc.bit as f64 * g.frozen_params as f64)
        .sum();
    Ok(weighted / total as f64)
}

/// Rank averaged with the same parameter weights as [`average_bit`].
pub fn average_rank(config: &ModelConfig, geom: &ModelGeometry) -> Result<f64> {
    geom.check_len(config)?;
    let total = geom.total_frozen_params();
    if total == 0 {
        return Err(Error::UndefinedAverage);
    }
    let weighted: f64 = config
        .layers()
        .iter()
        .zip(&geom.layers)
        .map(|(lc, g)| lc.rank as f64 * g.frozen_params as f64)
        .sum();
    Ok(weighted / total as f64)
}

pub fn mean_rank(config: &ModelConfig) -> f64 {
    if config.is_empty() {
        return 0.0;
    }
    config.layers().iter().map(|l| l.rank as f64).sum::<f64>() / config.len() as f64
}

/// A point in objective space: performance (maximized) and memory
/// (minimized).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub performance: f64,
    pub memory_bytes: u64,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub aux: BTreeMap<String, f64>,
}

impl EvalResult {
    pub fn new(performance: f64, memory_bytes: u64) -> Self {
        Self {
            performance,
            memory_bytes,
            aux: BTreeMap::new(),
        }
    }
}

/// Pareto dominance: no worse on both objectives and strictly better on one.
pub fn dominates(a: &EvalResult, b: &EvalResult) -> bool {
    let no_worse = a.performance >= b.performance && a.memory_bytes <= b.memory_bytes;
    let strictly = a.performance > b.performance || a.memory_bytes < b.memory_bytes;
    no_worse && strictly
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn one_layer(frozen: u64, adapters: &[(u64, u64)]) -> ModelGeometry {
        ModelGeometry::new(vec![LayerGeometry::new(frozen, adapters)])
    }

    #[test]
    fn footprint_adapters_only() {
        let g = one_layer(0, &[(4, 4)]);
        let c = ModelConfig::new(vec![LayerConfig::new(4, 2)]);
        assert_eq!(memory_footprint(&c, &g).unwrap(), 32);
    }

    #[test]
    fn footprint_frozen_only() {
        let g = one_layer(1024, &[]);
        let c = ModelConfig::new(vec![LayerConfig::new(4, 2)]);
        assert_eq!(memory_footprint(&c, &g).unwrap(), 512);
    }

    #[test]
    fn footprint_two_layers() {
        let layer = LayerGeometry::new(100, &[(8, 8)]);
        let g = ModelGeometry::new(vec![layer.clone(), layer]);
        let c = ModelConfig::new(vec![LayerConfig::new(2, 4), LayerConfig::new(8, 4)]);
        assert_eq!(g.layer_bytes(&c).unwrap(), vec![153, 228]);
        assert_eq!(memory_footprint(&c, &g).unwrap(), 381);
    }

    #[test]
    fn footprint_rounds_up_per_layer() {
        // 2 bits per layer: 1 byte each, not 4 bits -> 1 byte overall
        let layer = LayerGeometry::new(1, &[]);
        let g = ModelGeometry::new(vec![layer.clone(), layer]);
        let c = ModelConfig::new(vec![LayerConfig::new(2, 2); 2]);
        assert_eq!(memory_footprint(&c, &g).unwrap(), 2);
    }

    #[test]
    fn footprint_fixed_overhead() {
        let mut layer = LayerGeometry::new(8, &[]);
        layer.fixed_overhead_bytes = 10;
        let g = ModelGeometry::new(vec![layer]);
        let c = ModelConfig::new(vec![LayerConfig::new(8, 2)]);
        assert_eq!(memory_footprint(&c, &g).unwrap(), 18);
    }

    #[test]
    fn footprint_length_mismatch() {
        let g = one_layer(10, &[]);
        let c = ModelConfig::new(vec![LayerConfig::new(4, 2); 2]);
        assert!(matches!(
            memory_footprint(&c, &g),
            Err(Error::LengthMismatch {
                config: 2,
                geometry: 1
            })
        ));
    }

    #[test]
    fn average_bit_examples() {
        let layer = LayerGeometry::new(100, &[]);
        let g = ModelGeometry::new(vec![layer.clone(), layer]);
        let uniform = ModelConfig::new(vec![LayerConfig::new(4, 2); 2]);
        assert_eq!(average_bit(&uniform, &g).unwrap(), 4.0);
        let mixed = ModelConfig::new(vec![LayerConfig::new(2, 2), LayerConfig::new(8, 2)]);
        assert_eq!(average_bit(&mixed, &g).unwrap(), 5.0);

        let g = ModelGeometry::new(vec![LayerGeometry::new(100, &[]), LayerGeometry::new(300, &[])]);
        let c = ModelConfig::new(vec![LayerConfig::new(8, 2), LayerConfig::new(2, 2)]);
        assert_eq!(average_bit(&c, &g).unwrap(), 3.5);
    }

    #[test]
    fn average_bit_zero_params() {
        let g = one_layer(0, &[(4, 4)]);
        let c = ModelConfig::new(vec![LayerConfig::new(4, 2)]);
        assert!(matches!(average_bit(&c, &g), Err(Error::UndefinedAverage)));
    }

    #[test]
    fn dominance_examples() {
        let a = EvalResult::new(1.0, 10);
        let b = EvalResult::new(0.5, 20);
        assert!(dominates(&a, &b));
        assert!(!dominates(&a, &a.clone()));
        let c = EvalResult::new(1.0, 20);
        let d = EvalResult::new(0.5, 10);
        assert!(!dominates(&c, &d));
        assert!(!dominates(&d, &c));
    }

    #[test]
    fn space_rejects_unsorted_and_empty() {
        assert!(SearchSpace::new(vec![], vec![2]).is_err());
        assert!(SearchSpace::new(vec![4, 2], vec![2]).is_err());
        assert!(SearchSpace::new(vec![2, 2], vec![2]).is_err());
        assert!(SearchSpace::new(vec![0, 2], vec![2]).is_err());
        assert!(SearchSpace::new(vec![2, 4], vec![1]).is_ok());
    }

    #[test]
    fn validate_config_against_space() {
        let space = SearchSpace::default();
        assert!(space
            .validate(&ModelConfig::new(vec![LayerConfig::new(4, 8)]))
            .is_ok());
        assert!(matches!(
            space.validate(&ModelConfig::new(vec![LayerConfig::new(3, 8)])),
            Err(Error::OutOfSpace { axis: "bits", .. })
        ));
        assert!(space.validate(&ModelConfig::new(vec![])).is_err());
    }

    #[test]
    fn config_object_json() {
        let c = ModelConfig::new(vec![LayerConfig::new(4, 8), LayerConfig::new(2, 16)]);
        let s = serde_json::to_string(&c).unwrap();
        assert_eq!(s, r#"{"bits":[4,2],"ranks":[8,16]}"#);
        assert_eq!(serde_json::from_str::<ModelConfig>(&s).unwrap(), c);
        assert!(serde_json::from_str::<ModelConfig>(r#"{"bits":[4],"ranks":[]}"#).is_err());
    }

    #[test]
    fn geometry_document() {
        let doc = r#"{"layers":[{"frozen_params":64,"adapter_in_dims":[8],"adapter_out_dims":[8]}]}"#;
        let g = ModelGeometry::from_json_str(doc).unwrap();
        assert_eq!(g.adapter_bytes_per_param, 2);
        let bad = r#"{"layers":[{"frozen_params":64,"adapter_in_dims":[8],"adapter_out_dims":[]}]}"#;
        assert!(ModelGeometry::from_json_str(bad).is_err());
        assert!(ModelGeometry::from_json_str(r#"{"layers":[]}"#).is_err());
    }

    fn arb_result() -> impl Strategy<Value = EvalResult> {
        (0..5i32, 0..5u64).prop_map(|(p, m)| EvalResult::new(p as f64, m))
    }

    proptest! {
        #[test]
        fn footprint_monotone(
            bits in proptest::collection::vec(0..3usize, 1..6),
            ranks in proptest::collection::vec(0..8usize, 1..6),
            layer in 0..6usize,
            bump_bit in any::<bool>(),
        ) {
            let space = SearchSpace::default();
            let n = bits.len().min(ranks.len());
            let layer = layer % n;
            let geom = ModelGeometry::uniform_square(n, 16, 2);
            let cfg = ModelConfig::new((0..n)
                .map(|i| LayerConfig::new(space.bits()[bits[i]], space.ranks()[ranks[i]]))
                .collect());
            let mut up = cfg.clone();
            let lc = &mut up.layers_mut()[layer];
            if bump_bit {
                lc.bit = space.bits()[(bits[layer] + 1).min(2)];
            } else {
                lc.rank = space.ranks()[(ranks[layer] + 1).min(7)];
            }
            prop_assert!(memory_footprint(&up, &geom).unwrap() >= memory_footprint(&cfg, &geom).unwrap());
            let avg = average_bit(&cfg, &geom).unwrap();
            prop_assert!((2.0..=8.0).contains(&avg));
        }

        #[test]
        fn dominance_is_strict_partial_order(a in arb_result(), b in arb_result(), c in arb_result()) {
            prop_assert!(!dominates(&a, &a));
            prop_assert!(!(dominates(&a, &b) && dominates(&b, &a)));
            if dominates(&a, &b) && dominates(&b, &c) {
                prop_assert!(dominates(&a, &c));
            }
        }
    }
}
