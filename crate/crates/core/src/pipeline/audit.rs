use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::Result;
use crate::model::Model;
use crate::quantizer::{FakeQuantizer, SiteKind};

use super::ptq::site_activations;

/// Estimated and measured bit-width of one quantization site.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SiteBits {
    pub layer: usize,
    pub kind: SiteKind,
    /// Smooth estimate `log₂((u − l)/s + 1)`.
    pub estimated: f64,
    pub unique_values: usize,
    /// `⌈log₂(unique_values)⌉`.
    pub actual: u32,
}

/// Mean estimate, mean and max measured bit-width of one site kind.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BitAggregate {
    pub mean_estimated: f64,
    pub mean_actual: f64,
    pub max_actual: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BitWidthReport {
    pub sites: Vec<SiteBits>,
    pub weights: BitAggregate,
    pub activations: BitAggregate,
}

/// Bits needed to index `count` distinct values; a single value needs none.
pub fn bits_for_count(count: usize) -> u32 {
    if count <= 1 {
        0
    } else {
        usize::BITS - (count - 1).leading_zeros()
    }
}

/// Number of distinct deployed values `s·Q(x)`.
pub fn unique_levels(q: &FakeQuantizer<f64>, values: &[f64]) -> usize {
    // + 0.0 folds −0 into +0
    values
        .iter()
        .map(|&v| (q.quantize(v) + 0.0).to_bits())
        .collect::<HashSet<u64>>()
        .len()
}

fn aggregate(sites: &[&SiteBits]) -> BitAggregate {
    let n = sites.len().max(1) as f64;
    BitAggregate {
        mean_estimated: sites.iter().map(|s| s.estimated).sum::<f64>() / n,
        mean_actual: sites.iter().map(|s| s.actual as f64).sum::<f64>() / n,
        max_actual: sites.iter().map(|s| s.actual).max().unwrap_or(0),
    }
}

/// Counts distinct dequantized weights and activations (over `val_inputs`)
/// at every quantized layer, using deterministic rounding.
pub fn audit_bitwidth(model: &Model<f64>, val_inputs: &Tensor<f64>) -> Result<BitWidthReport> {
    let acts = site_activations(model, val_inputs)?;
    let mut sites = Vec::new();
    for (&i, act) in model.quantized_layers().iter().zip(&acts) {
        let q = model.layers[i].quantizers.as_ref().expect("quantized layer");
        for (kind, fq, values) in [
            (SiteKind::Weight, &q.weight, model.layers[i].weights.data()),
            (SiteKind::Activation, &q.activation, act.data()),
        ] {
            let unique = unique_levels(fq, values);
            if unique <= 1 {
                log::warn!("layer {i} {kind:?} site collapsed to a single value");
            }
            sites.push(SiteBits {
                layer: i,
                kind,
                estimated: fq.bitwidth(),
                unique_values: unique,
                actual: bits_for_count(unique),
            });
        }
    }
    let of = |k: SiteKind| sites.iter().filter(|s| s.kind == k).collect::<Vec<_>>();
    let weights = aggregate(&of(SiteKind::Weight));
    let activations = aggregate(&of(SiteKind::Activation));
    Ok(BitWidthReport {
        sites,
        weights,
        activations,
    })
}

impl BitWidthReport {
    /// Max measured bit-width within both targets.
    pub fn within(&self, weight_bits: f64, activation_bits: f64) -> bool {
        self.weights.max_actual as f64 <= weight_bits && self.activations.max_actual as f64 <= activation_bits
    }

    /// `|mean estimated − mean actual|` for weights and activations.
    pub fn estimate_residuals(&self) -> (f64, f64) {
        (
            (self.weights.mean_estimated - self.weights.mean_actual).abs(),
            (self.activations.mean_estimated - self.activations.mean_actual).abs(),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_model, ModelSpec};
    use crate::pipeline::ptq::ptq_minmax;
    use crate::quantizer::NoiseMode;

    #[test]
    fn bits_for_counts() {
        assert_eq!(bits_for_count(1), 0);
        assert_eq!(bits_for_count(2), 1);
        assert_eq!(bits_for_count(3), 2);
        assert_eq!(bits_for_count(4), 2);
        assert_eq!(bits_for_count(5), 3);
        assert_eq!(bits_for_count(1024), 10);
        assert_eq!(bits_for_count(1025), 11);
    }

    #[test]
    fn collapsed_site_reports_zero_bits() {
        let q = FakeQuantizer::from_scale_bounds(SiteKind::Weight, NoiseMode::Bernoulli, 1.0, -0.5, 0.4).unwrap();
        assert_eq!(unique_levels(&q, &[0.1, -0.2, 0.3, 0.0, -0.0]), 1);
    }

    #[test]
    fn one_bit_site_has_at_most_two_values() {
        let q = FakeQuantizer::from_scale_bounds(SiteKind::Weight, NoiseMode::Bernoulli, 1.0, -0.7, 0.3).unwrap();
        let values: Vec<f64> = (0..1000).map(|i| i as f64 / 100.0 - 5.0).collect();
        assert!(unique_levels(&q, &values) <= 2);
    }

    #[test]
    fn ptq_model_audits_at_most_ten_bits() {
        let mut m = build_model(&ModelSpec::preset("mlp", &[2], 2).unwrap(), true, NoiseMode::Bernoulli, 2).unwrap();
        let x = Tensor::from_f64(vec![400, 2], &(0..800).map(|i| ((i * 37) % 101) as f64 / 25.0 - 2.0).collect::<Vec<_>>())
            .unwrap();
        ptq_minmax(&mut m, &x).unwrap();
        let r = audit_bitwidth(&m, &x).unwrap();
        assert_eq!(r.sites.len(), 2);
        assert!(r.weights.max_actual <= 10);
        assert!(r.activations.max_actual <= 10);
        assert!((r.weights.mean_estimated - 10.0).abs() < 1e-9);
        assert!(r.weights.max_actual as f64 >= r.weights.mean_actual);
    }
}
