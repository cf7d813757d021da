//! Central finite-difference verification of analytic gradients.

use super::model::Model;
use super::params::{Grads, ParamId, ParamStore};
use crate::error::Result;

/// Anything that owns a parameter store and can evaluate a scalar loss.
pub trait Parameterized {
    fn store(&self) -> &ParamStore;
    fn store_mut(&mut self) -> &mut ParamStore;
}

impl Parameterized for Model {
    fn store(&self) -> &ParamStore {
        self.params()
    }

    fn store_mut(&mut self) -> &mut ParamStore {
        self.params_mut()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub max_abs_grad: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub scalars_checked: usize,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&ParamCheck> {
        self.params.iter().max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }
}

/// Relative error `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compare `analytic` against central differences of `loss` for every scalar
/// of the parameters in `ids`. Parameters are restored bit-exactly.
pub fn check_gradients<M, F>(model: &mut M, analytic: &Grads, ids: &[ParamId], h: f64, floor: f64, loss: F) -> Result<GradCheckReport>
where
    M: Parameterized,
    F: Fn(&M) -> Result<f64>,
{
    let mut params = Vec::with_capacity(ids.len());
    let mut scalars = 0;
    for &id in ids {
        let n = model.store().get(id).len();
        let mut pc = ParamCheck {
            name: model.store().name(id).to_string(),
            max_rel_error: 0.0,
            max_abs_error: 0.0,
            max_abs_grad: 0.0,
        };
        for i in 0..n {
            let orig = model.store().get(id).data()[i];
            model.store_mut().get_mut(id).data_mut()[i] = orig + h;
            let up = loss(model);
            model.store_mut().get_mut(id).data_mut()[i] = orig - h;
            let down = loss(model);
            model.store_mut().get_mut(id).data_mut()[i] = orig;
            let numeric = (up? - down?) / (2.0 * h);
            let a = analytic.get(id).data()[i];
            pc.max_rel_error = pc.max_rel_error.max(relative_error(a, numeric, floor));
            pc.max_abs_error = pc.max_abs_error.max((a - numeric).abs());
            pc.max_abs_grad = pc.max_abs_grad.max(a.abs());
            scalars += 1;
        }
        params.push(pc);
    }
    Ok(GradCheckReport {
        params,
        scalars_checked: scalars,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::graph::Graph;
    use crate::nn::model::combine_losses;
    use crate::nn::model::tests::{toy_batch, toy_config};
    use crate::nn::tensor::Tensor;
    use crate::rng::seeded;
    use crate::text::{CorruptedExample, MaskedExample};
    use rand_distr::{Distribution, Normal};

    const VOCAB: usize = 12;
    const LAMBDA: f64 = 3.0;

    /// Toy model with every tensor perturbed so no gradient is trivially zero.
    fn toy_model(seed: u64) -> Model {
        let mut rng = seeded(seed);
        let mut m = Model::new(toy_config(VOCAB), &mut rng).unwrap();
        let dist = Normal::new(0.0, 0.3).unwrap();
        for id in m.params().ids().collect::<Vec<_>>() {
            for v in m.params_mut().get_mut(id).data_mut() {
                *v += dist.sample(&mut rng);
            }
        }
        m
    }

    fn loss(m: &Model, masked: &[MaskedExample], corrupted: &[CorruptedExample], gen: bool, disc: bool) -> Result<(Graph, crate::nn::NodeId)> {
        let mut g = Graph::new();
        let lg = if gen {
            let mr: Vec<_> = masked.iter().collect();
            Some(m.generator_forward(&mut g, &mr)?.loss)
        } else {
            None
        };
        let ld = if disc {
            let cr: Vec<_> = corrupted.iter().collect();
            Some(m.discriminator_forward(&mut g, &cr)?.loss)
        } else {
            None
        };
        let root = combine_losses(&mut g, lg, ld, LAMBDA)?;
        Ok((g, root))
    }

    fn run_check(gen: bool, disc: bool) -> GradCheckReport {
        let mut m = toy_model(21);
        let (masked, corrupted) = toy_batch(VOCAB, 22);
        let (g, root) = loss(&m, &masked, &corrupted, gen, disc).unwrap();
        let grads = g.backward(root, m.params()).unwrap();
        let ids: Vec<_> = m.params().ids().collect();
        check_gradients(&mut m, &grads, &ids, 1e-5, 1e-6, |m| {
            let (g, r) = loss(m, &masked, &corrupted, gen, disc)?;
            Ok(g.value(r).item())
        })
        .unwrap()
    }

    #[test]
    fn generator_loss_gradients() {
        let r = run_check(true, false);
        assert!(r.max_rel_error() < 1e-4, "{:?}", r.worst());
    }

    #[test]
    fn discriminator_loss_gradients() {
        let r = run_check(false, true);
        assert!(r.max_rel_error() < 1e-4, "{:?}", r.worst());
    }

    #[test]
    fn combined_loss_gradients() {
        let r = run_check(true, true);
        assert!(r.max_rel_error() < 1e-4, "{:?}", r.worst());
    }

    #[test]
    fn disc_loss_leaves_generator_untouched() {
        let m = toy_model(5);
        let (masked, corrupted) = toy_batch(VOCAB, 6);
        let (g, root) = loss(&m, &masked, &corrupted, false, true).unwrap();
        let grads = g.backward(root, m.params()).unwrap();
        for id in m.generator_ids() {
            assert!(grads.get(id).data().iter().all(|&v| v == 0.0), "{}", m.params().name(id));
        }
    }

    #[test]
    fn embedding_gradient_is_additive() {
        let m = toy_model(7);
        let (masked, corrupted) = toy_batch(VOCAB, 8);
        let emb = m.embedding_id();
        let grad = |gen, disc| {
            let (g, root) = loss(&m, &masked, &corrupted, gen, disc).unwrap();
            g.backward(root, m.params()).unwrap().get(emb).clone()
        };
        let both = grad(true, true);
        let mut sum = grad(true, false);
        sum.add_assign(&grad(false, true));
        for (a, b) in both.data().iter().zip(sum.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(grad(true, false).sq_norm() > 0.0 && grad(false, true).sq_norm() > 0.0);
    }

    #[test]
    fn per_example_grads_average_to_batch_grad() {
        let m = toy_model(9);
        let (_, corrupted) = toy_batch(VOCAB, 10);
        let refs: Vec<_> = corrupted.iter().collect();
        let per = m.per_example_disc_grads(&refs).unwrap();
        let mut g = Graph::new();
        let out = m.discriminator_forward(&mut g, &refs).unwrap();
        let batch = g.backward(out.loss, m.params()).unwrap();
        let mut mean = per[0].clone();
        for p in &per[1..] {
            mean.add_assign(p);
        }
        mean.scale(1.0 / per.len() as f64);
        for id in m.params().ids() {
            for (a, b) in mean.get(id).data().iter().zip(batch.get(id).data()) {
                assert!((a - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn duplicated_examples_share_norms() {
        let m = toy_model(11);
        let (_, corrupted) = toy_batch(VOCAB, 12);
        let norms = m.per_example_grad_norms(&[&corrupted[0], &corrupted[1], &corrupted[0]]).unwrap();
        assert_eq!(norms[0], norms[2]);
    }

    #[test]
    fn saturated_predictions_have_tiny_norms() {
        let mut m = toy_model(13);
        let (_, mut corrupted) = toy_batch(VOCAB, 14);
        // all-original labels and a head pushed to a huge constant logit
        for c in &mut corrupted {
            *c = CorruptedExample::from_parts(c.original.ids().to_vec(), c.original.clone(), c.mask_positions.clone()).unwrap();
        }
        let head = m.disc_head_id();
        let lnf_b = m.params().id("disc.lnf_b").unwrap();
        let lnf_g = m.params().id("disc.lnf_g").unwrap();
        let h = m.config().discriminator.hidden;
        *m.params_mut().get_mut(lnf_g) = Tensor::zeros(&[h]);
        *m.params_mut().get_mut(lnf_b) = Tensor::filled(&[h], 1.0);
        *m.params_mut().get_mut(head) = Tensor::filled(&[h, 1], 5.0);
        let refs: Vec<_> = corrupted.iter().collect();
        let norms = m.per_example_grad_norms(&refs).unwrap();
        assert!(norms.iter().all(|&n| n < 1e-6), "{norms:?}");
    }
}
