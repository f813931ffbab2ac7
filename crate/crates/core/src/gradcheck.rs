//! Finite-difference verification of whole-model gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::encoder::{model_loss, DualEncoder, Result, Trainable};
use crate::tensor::{relative_error, Graph, TensorError};

/// Outcome for one trainable tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorCheck {
    pub name: String,
    pub numel: usize,
    pub checked: usize,
    pub max_rel_err: f64,
    /// Backprop and finite-difference values at the worst coordinate.
    pub worst: (f64, f64),
}

fn loss_value(model: &DualEncoder, images: &[&[usize]], texts: &[&[usize]]) -> Result<f64> {
    let mut g = Graph::new();
    let bound = model.bind(&mut g, Trainable::Nothing)?;
    let loss = model_loss(&mut g, model, &bound, images, texts)?;
    Ok(g.value(loss).item())
}

/// Backprop gradients of the contrastive loss, by tensor name.
fn analytic(
    model: &DualEncoder,
    images: &[&[usize]],
    texts: &[&[usize]],
    trainable: Trainable,
) -> Result<Vec<(String, Vec<f64>)>> {
    let mut g = Graph::new();
    let bound = model.bind(&mut g, trainable)?;
    let loss = model_loss(&mut g, model, &bound, images, texts)?;
    g.backward(loss)?;
    let grad = |v| g.grad(v).map(<[f64]>::to_vec).ok_or(TensorError::InvalidArgument("missing gradient".into()));
    let mut out = Vec::new();
    match trainable {
        Trainable::Nothing => {}
        Trainable::Base => {
            for (prefix, params) in [("vision", &bound.vision), ("text", &bound.text)] {
                for (name, var) in params.named() {
                    out.push((format!("{prefix}.{name}"), grad(*var)?));
                }
            }
        }
        Trainable::Adapters => {
            for (adapter, vars) in model.adapters.iter().zip(&bound.adapters) {
                let Some(vars) = vars else { continue };
                for (field, var) in [("a", vars.a), ("b", vars.b), ("w", vars.w)] {
                    out.push((format!("adapter.{}.{field}", adapter.target), grad(var)?));
                }
            }
        }
    }
    Ok(out)
}

/// Mutable view of the tensor called `name`.
fn slot<'a>(model: &'a mut DualEncoder, name: &str) -> Option<&'a mut [f64]> {
    if let Some(rest) = name.strip_prefix("adapter.") {
        let (site, field) = rest.rsplit_once('.')?;
        let adapter = model.adapters.iter_mut().find(|a| a.target.to_string() == site)?;
        return match field {
            "a" => Some(adapter.a_mut()),
            "b" => Some(adapter.b_mut()),
            "w" => Some(adapter.w_mut()),
            _ => None,
        };
    }
    model
        .named_parameters_mut()
        .into_iter()
        .find(|(n, _)| n == name)
        .map(|(_, t)| t.data_mut())
}

/// Compares backprop against central differences `(L(x+h) − L(x−h)) / 2h`
/// for every tensor selected by `trainable`. With `max_coords`, each tensor
/// is checked on that many coordinates drawn without replacement.
pub fn check_model_gradients(
    model: &DualEncoder,
    images: &[&[usize]],
    texts: &[&[usize]],
    trainable: Trainable,
    h: f64,
    max_coords: Option<usize>,
    seed: u64,
) -> Result<Vec<TensorCheck>> {
    if !(h > 0.0) {
        return Err(TensorError::InvalidArgument(format!("step must be positive, got {h}")).into());
    }
    let grads = analytic(model, images, texts, trainable)?;
    let mut work = model.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(grads.len());
    for (name, grad) in grads {
        let n = grad.len();
        let coords: Vec<usize> = match max_coords {
            Some(m) if m < n => sample(&mut rng, n, m).into_vec(),
            _ => (0..n).collect(),
        };
        let mut worst = (0.0f64, (0.0, 0.0));
        for &i in &coords {
            let x0 = slot(&mut work, &name).expect("named tensor exists")[i];
            slot(&mut work, &name).expect("named tensor exists")[i] = x0 + h;
            let plus = loss_value(&work, images, texts)?;
            slot(&mut work, &name).expect("named tensor exists")[i] = x0 - h;
            let minus = loss_value(&work, images, texts)?;
            slot(&mut work, &name).expect("named tensor exists")[i] = x0;
            let numeric = (plus - minus) / (2.0 * h);
            let err = relative_error(grad[i], numeric);
            if err > worst.0 {
                worst = (err, (grad[i], numeric));
            }
        }
        out.push(TensorCheck {
            name,
            numel: n,
            checked: coords.len(),
            max_rel_err: worst.0,
            worst: worst.1,
        });
    }
    Ok(out)
}
