use std::collections::{BTreeMap, HashMap, HashSet};

use super::{BackwardCtx, Origin, ParamId, Tensor};
use crate::error::{Error, Result};

/// Gradients of a scalar loss, one tensor per parameter that the loss
/// depends on.
#[derive(Clone, Debug, Default)]
pub struct GradientMap {
    grads: BTreeMap<ParamId, Tensor>,
}

impl GradientMap {
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads.get(&id)
    }

    /// Gradient for `param`, or zeros of its shape when the loss does not
    /// reach it.
    pub fn get_or_zeros(&self, param: &Tensor) -> Tensor {
        param
            .param_id()
            .and_then(|id| self.grads.get(&id).cloned())
            .unwrap_or_else(|| Tensor::zeros(param.shape()))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.grads.iter().map(|(k, v)| (*k, v))
    }

    pub fn all_finite(&self) -> bool {
        self.grads
            .values()
            .all(|g| g.data().iter().all(|v| v.is_finite()))
    }

    /// Sums `other` into `self`.
    pub fn merge(&mut self, other: GradientMap) -> Result<()> {
        for (id, g) in other.grads {
            match self.grads.remove(&id) {
                Some(existing) => {
                    let sum = existing.add(&g)?.detach();
                    self.grads.insert(id, sum);
                }
                None => {
                    self.grads.insert(id, g);
                }
            }
        }
        Ok(())
    }
}

fn topo_order(root: &Tensor) -> Vec<Tensor> {
    let mut order = Vec::new();
    let mut visited = HashSet::new();
    let mut stack = vec![(root.clone(), false)];
    while let Some((t, expanded)) = stack.pop() {
        if expanded {
            order.push(t);
            continue;
        }
        if !visited.insert(t.id()) {
            continue;
        }
        stack.push((t.clone(), true));
        if let Origin::Op { parents, .. } = &t.inner.origin {
            for p in parents {
                if p.requires_grad() && !visited.contains(&p.id()) {
                    stack.push((p.clone(), false));
                }
            }
        }
    }
    order
}

/// Reverse-mode sweep from a one-element `loss`. Gradients are summed over
/// every path from the loss to each parameter.
pub fn backward(loss: &Tensor) -> Result<GradientMap> {
    if loss.numel() != 1 {
        return Err(Error::contract(
            "backward",
            format!("loss must be scalar, got shape {:?}", loss.shape()),
        ));
    }
    let mut out = GradientMap::default();
    if !loss.requires_grad() {
        return Ok(out);
    }

    let order = topo_order(loss);
    let mut pending: HashMap<u64, Vec<f64>> = HashMap::new();
    pending.insert(loss.id(), vec![1.0]);
    let mut param_grads: BTreeMap<ParamId, (Vec<usize>, Vec<f64>)> = BTreeMap::new();

    for node in order.iter().rev() {
        let Some(grad) = pending.remove(&node.id()) else {
            continue;
        };
        match &node.inner.origin {
            Origin::Constant => {}
            Origin::Param(id) => {
                let entry = param_grads
                    .entry(*id)
                    .or_insert_with(|| (node.shape().to_vec(), vec![0.0; grad.len()]));
                for (acc, g) in entry.1.iter_mut().zip(&grad) {
                    *acc += g;
                }
            }
            Origin::Op {
                name,
                parents,
                backward,
            } => {
                let ctx = BackwardCtx {
                    grad: &grad,
                    output: node.data(),
                    parents,
                };
                let mut bufs: Vec<Option<Vec<f64>>> = Vec::with_capacity(parents.len());
                let mut taken: Vec<u64> = Vec::with_capacity(parents.len());
                for p in parents {
                    if !p.requires_grad() {
                        bufs.push(None);
                    } else if taken.contains(&p.id()) {
                        bufs.push(Some(vec![0.0; p.numel()]));
                    } else {
                        taken.push(p.id());
                        let buf = pending.remove(&p.id()).unwrap_or_else(|| vec![0.0; p.numel()]);
                        bufs.push(Some(buf));
                    }
                }
                backward(&ctx, &mut bufs);
                for (parent, buf) in parents.iter().zip(bufs) {
                    let Some(buf) = buf else { continue };
                    debug_assert_eq!(buf.len(), parent.numel(), "{name}");
                    match pending.get_mut(&parent.id()) {
                        Some(acc) => {
                            for (a, g) in acc.iter_mut().zip(&buf) {
                                *a += g;
                            }
                        }
                        None => {
                            pending.insert(parent.id(), buf);
                        }
                    }
                }
            }
        }
    }

    for (id, (shape, data)) in param_grads {
        // Gradients of finite graphs can still overflow; keep them as-is so
        // the optimizer can count and skip the step.
        let t = Tensor::build(shape, data, Origin::Constant);
        out.grads.insert(id, t);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient() {
        let w = Tensor::param(ParamId(3), &[2], vec![1.0, 2.0]).unwrap();
        let loss = w.mul(&w).unwrap().sum_all().unwrap();
        let g = backward(&loss).unwrap();
        assert_eq!(g.get(ParamId(3)).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn constant_loss_gives_zero_map() {
        let w = Tensor::param(ParamId(0), &[2], vec![1.0, 2.0]).unwrap();
        let loss = Tensor::scalar(4.0);
        let g = backward(&loss).unwrap();
        assert!(g.is_empty());
        assert_eq!(g.get_or_zeros(&w).data(), &[0.0, 0.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let w = Tensor::param(ParamId(0), &[2], vec![1.0, 2.0]).unwrap();
        assert!(matches!(backward(&w), Err(Error::Contract { .. })));
    }

    #[test]
    fn paths_accumulate() {
        // loss = sum(w * w + 3 w) -> 2w + 3
        let w = Tensor::param(ParamId(0), &[3], vec![1.0, -1.0, 0.5]).unwrap();
        let loss = w
            .mul(&w)
            .unwrap()
            .add(&w.scale(3.0).unwrap())
            .unwrap()
            .sum_all()
            .unwrap();
        let g = backward(&loss).unwrap();
        assert_eq!(g.get(ParamId(0)).unwrap().data(), &[5.0, 1.0, 4.0]);
    }

    #[test]
    fn merge_sums() {
        let w = Tensor::param(ParamId(0), &[1], vec![2.0]).unwrap();
        let mut a = backward(&w.mul(&w).unwrap().sum_all().unwrap()).unwrap();
        let b = backward(&w.sum_all().unwrap()).unwrap();
        a.merge(b).unwrap();
        assert_eq!(a.get(ParamId(0)).unwrap().data(), &[5.0]);
    }
}
