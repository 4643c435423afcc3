//! Finite-difference check of the full decoder and set-loss composition.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::loss::{set_loss, LossConfig};
use super::TrainError;
use crate::autograd::gradcheck::{CheckOutcome, Tolerance};
use crate::autograd::{Graph, Tensor};
use crate::boxgeom::BBox;
use crate::dataset::ScoredBox;
use crate::decoder::{DecoderConfig, DecoderModel};
use crate::util::rng_from;

/// Three queries, width eight: small enough to difference every parameter.
pub fn tiny_decoder_config() -> DecoderConfig {
    DecoderConfig {
        num_queries: 3,
        num_layers: 1,
        model_dim: 8,
        num_heads: 2,
        mlp_hidden: 12,
        offset_scale: 0.5,
    }
}

struct Case {
    model: DecoderModel,
    shift: Vec<f64>,
    tokens: Tensor,
    positions: Tensor,
    union: BBox,
    gt: Vec<ScoredBox>,
}

fn randn(rng: &mut impl Rng, shape: Vec<usize>, sd: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| sd * Distribution::<f64>::sample(&StandardNormal, rng)).collect::<Vec<f64>>();
    Tensor::new(shape, data).expect("shape and length agree")
}

fn build_case(seed: u64) -> Result<Case, TrainError> {
    let cfg = tiny_decoder_config();
    let mut rng = rng_from(seed, &[b"composition-check"]);
    let mut model = DecoderModel::init(cfg.clone(), seed)?;
    // zero-initialized heads would hide most of the chain, so move every
    // parameter off its initial value
    for (_, t) in model.params_mut().iter_mut() {
        for v in t.data_mut() {
            *v += 0.3 * Distribution::<f64>::sample(&StandardNormal, &mut rng);
        }
    }
    let d = cfg.model_dim;
    let union = BBox::new(
        rng.random_range(0.4..0.6),
        rng.random_range(0.4..0.6),
        rng.random_range(0.3..0.5),
        rng.random_range(0.3..0.5),
    );
    let gt = (0..3)
        .map(|j| ScoredBox {
            bbox: BBox::new(
                rng.random_range(0.35..0.65),
                rng.random_range(0.35..0.65),
                rng.random_range(0.2..0.6),
                rng.random_range(0.2..0.6),
            ),
            score: [4.6, 4.1, 2.5][j],
        })
        .collect();
    Ok(Case {
        model,
        shift: randn(&mut rng, vec![d], 0.5).into_data(),
        tokens: randn(&mut rng, vec![6, d], 1.0),
        positions: randn(&mut rng, vec![6, d], 0.3),
        union,
        gt,
    })
}

/// Compares parameter gradients of `set_loss(decoder(..))` with central
/// differences. The smoothing threshold is lowered so all three score rules
/// are likely to occur.
pub fn composition_gradcheck(seed: u64, tol: &Tolerance) -> Result<CheckOutcome, TrainError> {
    let case = build_case(seed)?;
    let loss_cfg = LossConfig {
        smoothing_iou_threshold: 0.5,
        ..LossConfig::default()
    };
    let eval = |model: &DecoderModel, grads: bool| -> Result<(f64, Option<DecoderModel>), TrainError> {
        let mut g = Graph::new();
        let fv = model.forward(&mut g, Some(&case.shift), &case.tokens, &case.positions, &case.union)?;
        let (loss, b, _) = set_loss(&mut g, &fv, &case.gt, &loss_cfg)?;
        if !grads {
            return Ok((b.total, None));
        }
        g.backward(loss)?;
        let mut m = model.clone();
        for (_, t) in m.params_mut().iter_mut() {
            t.zero_grad();
        }
        g.accumulate_param_grads(m.params_mut(), 1.0)?;
        Ok((b.total, Some(m)))
    };
    let (_, with_grads) = eval(&case.model, true)?;
    let with_grads = with_grads.expect("gradients requested");

    let names: Vec<String> = case.model.params().iter().map(|(k, _)| k.clone()).collect();
    let mut work = case.model.clone();
    let mut worst: f64 = 0.0;
    let mut elements = 0;
    for name in &names {
        let analytic = with_grads.params().get(name).and_then(|t| t.grad()).map(<[f64]>::to_vec);
        let n = case.model.params().get(name).expect("listed").numel();
        for i in 0..n {
            let orig = case.model.params().get(name).expect("listed").data()[i];
            work.params_mut().get_mut(name).expect("listed").data_mut()[i] = orig + tol.step;
            let (up, _) = eval(&work, false)?;
            work.params_mut().get_mut(name).expect("listed").data_mut()[i] = orig - tol.step;
            let (down, _) = eval(&work, false)?;
            work.params_mut().get_mut(name).expect("listed").data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * tol.step);
            let a = analytic.as_ref().map_or(0.0, |g| g[i]);
            worst = worst.max(tol.relative_error(a, numeric));
            elements += 1;
        }
    }
    Ok(CheckOutcome {
        worst_rel_error: worst,
        elements,
        passed: worst <= tol.rel,
    })
}
