use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Tensor};
use crate::error::{Error, Result};
use crate::model::{Mode, Model};

/// Bit-width of the min-max warm start.
pub const PTQ_BITS: f64 = 10.0;

/// Bit-width of the explicit initialization used when PTQ is skipped.
pub const EXPLICIT_INIT_BITS: f64 = 16.0;

/// Upper clamp bound of activation sites under the explicit initialization.
pub const EXPLICIT_INIT_ACTIVATION_UPPER: f64 = 4.0;

fn min_max(values: &[f64]) -> (f64, f64) {
    values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
}

/// Pre-quantization inputs of every quantized layer over `inputs`, with all
/// quantizers bypassed.
pub fn site_activations(model: &Model<f64>, inputs: &Tensor<f64>) -> Result<Vec<Tensor<f64>>> {
    let mut g = Graph::new();
    let f = model.forward::<ChaCha8Rng>(&mut g, inputs, Mode::Eval, false, None)?;
    Ok(f.site_inputs.iter().map(|&v| g.value(v).clone()).collect())
}

/// Post-training min-max calibration: each weight site gets `[min W, max W]`,
/// each activation site the range of its inputs over `calibration` (lower
/// bound pinned at 0 after a ReLU), both at [`PTQ_BITS`]. Weights are untouched.
pub fn ptq_minmax(model: &mut Model<f64>, calibration: &Tensor<f64>) -> Result<()> {
    ptq_minmax_bits(model, calibration, PTQ_BITS)
}

pub fn ptq_minmax_bits(model: &mut Model<f64>, calibration: &Tensor<f64>, bits: f64) -> Result<()> {
    if !model.is_quantized() {
        return Err(Error::Contract("PTQ needs a model with quantized layers".into()));
    }
    let acts = site_activations(model, calibration)?;
    let sites = model.quantized_layers();
    for (&i, act) in sites.iter().zip(&acts) {
        let layer = &mut model.layers[i];
        let (wl, wu) = min_max(layer.weights.data());
        let q = layer.quantizers.as_mut().expect("quantized layer");
        if !(wl < wu) {
            return Err(Error::DegenerateRange {
                site: format!("layer{i}/weight"),
                value: wl,
            });
        }
        q.weight.set_range(wl, wu, bits)?;

        let (mut al, au) = min_max(act.data());
        if q.activation.lower_fixed() {
            al = 0.0;
        }
        if !(al < au) {
            return Err(Error::DegenerateRange {
                site: format!("layer{i}/activation"),
                value: au,
            });
        }
        q.activation.set_range(al, au, bits)?;
    }
    Ok(())
}

/// Data-free initialization for runs without PTQ: weight sites span the
/// weight range, activation sites `[0, 4]` (or `[−4, 4]` when the lower bound
/// is free), all at [`EXPLICIT_INIT_BITS`].
pub fn explicit_init(model: &mut Model<f64>) -> Result<()> {
    for i in model.quantized_layers() {
        let layer = &mut model.layers[i];
        let (wl, wu) = min_max(layer.weights.data());
        let q = layer.quantizers.as_mut().expect("quantized layer");
        if !(wl < wu) {
            return Err(Error::DegenerateRange {
                site: format!("layer{i}/weight"),
                value: wl,
            });
        }
        q.weight.set_range(wl, wu, EXPLICIT_INIT_BITS)?;
        let lower = if q.activation.lower_fixed() {
            0.0
        } else {
            -EXPLICIT_INIT_ACTIVATION_UPPER
        };
        q.activation
            .set_range(lower, EXPLICIT_INIT_ACTIVATION_UPPER, EXPLICIT_INIT_BITS)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_model, ModelSpec};
    use crate::quantizer::NoiseMode;

    fn student() -> Model<f64> {
        build_model(&ModelSpec::preset("mlp-deep", &[2], 2).unwrap(), true, NoiseMode::Bernoulli, 3).unwrap()
    }

    fn inputs() -> Tensor<f64> {
        Tensor::from_f64(vec![4, 2], &[0.5, -1.0, 2.0, 0.3, -1.2, 0.8, 0.0, 1.0]).unwrap()
    }

    #[test]
    fn ptq_sets_ten_bits_and_keeps_weights() {
        let mut m = student();
        let before: Vec<_> = m.layers.iter().map(|l| l.weights.clone()).collect();
        ptq_minmax(&mut m, &inputs()).unwrap();
        for q in m.quantizers() {
            assert!((q.weight.bitwidth() - 10.0).abs() < 1e-9);
            assert!((q.activation.bitwidth() - 10.0).abs() < 1e-9);
            assert_eq!(q.activation.lower(), 0.0);
        }
        let after: Vec<_> = m.layers.iter().map(|l| l.weights.clone()).collect();
        assert_eq!(before, after);
    }

    #[test]
    fn constant_weights_are_degenerate() {
        let mut m = student();
        m.layers[2].weights = Tensor::full(&[32, 32], 0.25);
        match ptq_minmax(&mut m, &inputs()) {
            Err(Error::DegenerateRange { site, .. }) => assert_eq!(site, "layer2/weight"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn dead_activations_are_degenerate() {
        let mut m = student();
        m.layers[0].weights = Tensor::zeros(&[2, 32]);
        match ptq_minmax(&mut m, &inputs()) {
            Err(Error::DegenerateRange { site, .. }) => assert_eq!(site, "layer1/activation"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn explicit_init_marks_quantizers_ready() {
        let mut m = student();
        assert!(!m.all_quantizers_initialized());
        explicit_init(&mut m).unwrap();
        assert!(m.all_quantizers_initialized());
        for q in m.quantizers() {
            assert!((q.activation.bitwidth() - EXPLICIT_INIT_BITS).abs() < 1e-9);
        }
    }
}
