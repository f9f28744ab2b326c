use crate::error::{Error, Result};
use crate::layers::ParamStore;
use crate::numerics::Scalar;
use crate::training::hyper::TrainHyper;

/// First and second moments for every parameter, in store order.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    pub step: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        let zeros = || store.iter().map(|p| vec![T::zero(); p.tensor.len()]).collect();
        Self {
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }

    fn check(&self, store: &ParamStore<T>) -> Result<()> {
        let ok = self.m.len() == store.len()
            && self.v.len() == store.len()
            && store
                .iter()
                .zip(self.m.iter().zip(&self.v))
                .all(|(p, (m, v))| m.len() == p.tensor.len() && v.len() == p.tensor.len());
        if ok {
            Ok(())
        } else {
            Err(Error::Contract("optimizer moments do not match the parameters".into()))
        }
    }
}

/// One bias-corrected Adam update using the gradients held in `store`, with
/// weight decay applied directly to the weights (`p -= lr·wd·p`) for the
/// parameters flagged for decay.
pub fn adam_step<T: Scalar>(
    store: &mut ParamStore<T>,
    state: &mut AdamState<T>,
    hyper: &TrainHyper,
    lr: f64,
) -> Result<()> {
    state.check(store)?;
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (T::lit(hyper.beta1), T::lit(hyper.beta2));
    let c1 = T::lit(1.0 - hyper.beta1.powi(t));
    let c2 = T::lit(1.0 - hyper.beta2.powi(t));
    let (lr_t, eps, wd) = (T::lit(lr), T::lit(hyper.adam_eps), T::lit(hyper.weight_decay));
    let one = T::one();
    for (i, p) in store.iter_mut().enumerate() {
        let decay = p.decay && hyper.weight_decay > 0.0;
        let grad = p.tensor.grad().map(<[T]>::to_vec);
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        let data = p.tensor.data_mut();
        for j in 0..data.len() {
            let g = grad.as_ref().map_or(T::zero(), |g| g[j]);
            m[j] = b1 * m[j] + (one - b1) * g;
            v[j] = b2 * v[j] + (one - b2) * g * g;
            let update = (m[j] / c1) / ((v[j] / c2).sqrt() + eps);
            if decay {
                data[j] -= lr_t * wd * data[j];
            }
            data[j] -= lr_t * update;
        }
    }
    Ok(())
}
