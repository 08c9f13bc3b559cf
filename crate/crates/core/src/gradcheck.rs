//! Central finite-difference checks against autograd gradients.

use candle_core::{DType, Device, Tensor, Var};

use crate::rng::RngStream;
use crate::{Error, Result};

/// Largest relative error between the autograd gradient of `f` and central
/// differences with step `h`, over every input and every element.
///
/// Inputs are converted to f64. Elements where both gradients are below
/// `1e-10` in magnitude count as matching.
pub fn max_relative_error<F>(inputs: &[Tensor], h: f64, f: F) -> Result<f64>
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
{
    let vars = inputs
        .iter()
        .map(|t| Ok(Var::from_tensor(&t.to_dtype(DType::F64)?)?))
        .collect::<Result<Vec<_>>>()?;
    let live: Vec<Tensor> = vars.iter().map(|v| v.as_tensor().clone()).collect();
    let out = f(&live)?;
    if out.elem_count() != 1 {
        return Err(Error::invalid("gradient check needs a scalar output"));
    }
    let grads = out.backward()?;

    let base: Vec<Vec<f64>> = vars
        .iter()
        .map(|v| Ok(v.as_tensor().flatten_all()?.to_vec1::<f64>()?))
        .collect::<Result<_>>()?;
    let eval = |which: usize, values: &[f64]| -> Result<f64> {
        let args = vars
            .iter()
            .enumerate()
            .map(|(i, v)| {
                if i == which {
                    Ok(Tensor::from_slice(values, v.dims(), v.device())?)
                } else {
                    Ok(v.as_tensor().detach())
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(f(&args)?.flatten_all()?.to_vec1::<f64>()?[0])
    };

    let mut worst = 0f64;
    for (i, var) in vars.iter().enumerate() {
        let analytic: Vec<f64> = match grads.get(var.as_tensor()) {
            Some(g) => g.flatten_all()?.to_vec1()?,
            None => vec![0.0; base[i].len()],
        };
        let mut probe = base[i].clone();
        for j in 0..probe.len() {
            probe[j] = base[i][j] + h;
            let plus = eval(i, &probe)?;
            probe[j] = base[i][j] - h;
            let minus = eval(i, &probe)?;
            probe[j] = base[i][j];
            let numeric = (plus - minus) / (2.0 * h);
            let scale = analytic[j].abs().max(numeric.abs());
            if scale > 1e-10 {
                worst = worst.max((analytic[j] - numeric).abs() / scale);
            }
        }
    }
    Ok(worst)
}

/// Worst relative error per loss function over `instances` random small
/// inputs drawn from `rng`.
pub fn loss_suite(rng: &mut RngStream, instances: usize, h: f64) -> Result<Vec<(&'static str, f64)>> {
    use crate::losses::*;
    let dev = Device::Cpu;
    let mut randn = |shape: &[usize], scale: f64| -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let v: Vec<f64> = (0..n).map(|_| rng.normal() * scale).collect();
        Ok(Tensor::from_vec(v, shape, &dev)?)
    };
    let mut worst: Vec<(&'static str, f64)> = Vec::new();
    let mut record = |name: &'static str, e: f64| match worst.iter_mut().find(|(n, _)| *n == name) {
        Some(w) => w.1 = w.1.max(e),
        None => worst.push((name, e)),
    };
    let labels = [0usize, 1, 1];
    for _ in 0..instances {
        let (lx, ly) = (randn(&[3, 2], 1.5)?, randn(&[3, 2], 1.5)?);
        for role in [ContentRole::Discriminator, ContentRole::Encoder] {
            let e = max_relative_error(&[lx.clone(), ly.clone()], h, |a| {
                content_adversarial_loss(&a[0], &[0, 0, 0], &a[1], &[1, 1, 1], role)
            })?;
            record("content_adversarial", e);
        }
        let (real, fake) = (randn(&[2, 1, 3, 3], 1.5)?, randn(&[2, 1, 3, 3], 1.5)?);
        let e = max_relative_error(&[real, fake.clone()], h, |a| {
            domain_adversarial_loss(Some(&a[0]), &a[1], AdversarialRole::Discriminator)
        })?;
        record("domain_adversarial", e);
        let e = max_relative_error(&[fake], h, |a| {
            domain_adversarial_loss(None, &a[0], AdversarialRole::Generator)
        })?;
        record("domain_adversarial", e);
        let img = [2, 3, 4, 4];
        let (x, y, xh, yh) = (randn(&img, 0.5)?, randn(&img, 0.5)?, randn(&img, 0.5)?, randn(&img, 0.5)?);
        let e = max_relative_error(&[x.clone(), y.clone(), xh.clone(), yh], h, |a| {
            cross_cycle_loss(&a[0], &a[1], &a[2], &a[3])
        })?;
        record("cross_cycle", e);
        let e = max_relative_error(&[x.clone(), xh.clone()], h, |a| self_reconstruction_loss(&a[0], &a[1]))?;
        record("self_reconstruction", e);
        let (z, zh) = (randn(&[3, 8], 1.0)?, randn(&[3, 8], 1.0)?);
        let e = max_relative_error(&[z.clone(), zh.clone()], h, |a| latent_regression_loss(&a[0], &a[1]))?;
        record("latent_regression", e);
        let e = max_relative_error(&[z.clone(), zh.clone()], h, |a| kl_loss(&a[0], &a[1]))?;
        record("kl", e);
        let e = max_relative_error(&[x.clone(), y.clone(), z, zh], h, |a| {
            mode_seeking_loss(&a[0], &a[1], &a[2], &a[3])
        })?;
        record("mode_seeking", e);
        let (cr, cf) = (randn(&[3, 3], 1.5)?, randn(&[3, 3], 1.5)?);
        let e = max_relative_error(&[cr, cf], h, |a| {
            domain_classification_loss(&a[0], &labels, &a[1], &[2, 0, 1])?.total()
        })?;
        record("domain_classification", e);
        let e = max_relative_error(&[x], h, |a| content_l1_regularizer(&a[0]))?;
        record("content_l1", e);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn smooth_function_passes() {
        let x = Tensor::new(&[0.3f64, -1.2, 2.0], &Device::Cpu).unwrap();
        let err = max_relative_error(&[x], 1e-5, |a| Ok(a[0].sqr()?.exp()?.sum_all()?)).unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn wrong_gradient_is_detected() {
        // detach() hides the dependence from autograd but not from the probe.
        let x = Tensor::new(&[0.5f64, 1.5], &Device::Cpu).unwrap();
        let err = max_relative_error(&[x], 1e-5, |a| {
            Ok((a[0].sqr()?.sum_all()? + a[0].detach().sum_all()?)?)
        })
        .unwrap();
        assert!(err > 0.1, "{err}");
    }

    #[test]
    fn every_loss_matches_finite_differences() {
        let mut rng = RngStream::new(3, "gradcheck");
        for (name, err) in loss_suite(&mut rng, 3, 1e-5).unwrap() {
            assert!(err < 1e-4, "{name}: {err}");
        }
    }
}
