//! Reverse-mode automatic differentiation on dynamically shaped `f64` arrays.
//!
//! The design follows define-by-run tapes: every operation allocates a node
//! holding its output data and (when any input requires a gradient) the
//! parent links plus a vjp implementation. `grad` walks the graph in reverse
//! topological order. When called with `create_graph = true` the vjps are
//! evaluated through the same op layer, so the returned gradients are
//! themselves differentiable — this is what the two-stage view-module update
//! relies on.

mod ops;

pub use ops::*;

use ndarray::ArrayD;
use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

pub(crate) trait Op {
    fn name(&self) -> &'static str;
    /// Gradients w.r.t. each parent. Entries with `wants[i] == false` may be
    /// returned as `None`.
    fn vjp(&self, parents: &[Var], output: &Var, grad: &Var, wants: &[bool]) -> Vec<Option<Var>>;
}

pub(crate) struct Node {
    pub(crate) id: u64,
    pub(crate) data: Arc<ArrayD<f64>>,
    pub(crate) parents: RefCell<Vec<Var>>,
    pub(crate) op: Option<Box<dyn Op>>,
    pub(crate) requires_grad: bool,
}

// Deep graphs would otherwise drop recursively and blow the stack.
impl Drop for Node {
    fn drop(&mut self) {
        let mut stack: Vec<Var> = std::mem::take(&mut *self.parents.borrow_mut());
        while let Some(v) = stack.pop() {
            if let Ok(node) = Rc::try_unwrap(v.node) {
                stack.extend(std::mem::take(&mut *node.parents.borrow_mut()));
            }
        }
    }
}

/// A value in the computation graph.
#[derive(Clone)]
pub struct Var {
    pub(crate) node: Rc<Node>,
}

impl std::fmt::Debug for Var {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.node.id)
            .field("shape", &self.shape())
            .field("requires_grad", &self.node.requires_grad)
            .finish()
    }
}

impl Var {
    fn new(
        data: ArrayD<f64>,
        parents: Vec<Var>,
        op: Option<Box<dyn Op>>,
        requires_grad: bool,
    ) -> Var {
        Var {
            node: Rc::new(Node {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                data: Arc::new(data),
                parents: RefCell::new(parents),
                op,
                requires_grad,
            }),
        }
    }

    /// A leaf that participates in gradient computation.
    pub fn param(data: ArrayD<f64>) -> Var {
        Var::new(data, Vec::new(), None, true)
    }

    /// A leaf treated as constant.
    pub fn constant(data: ArrayD<f64>) -> Var {
        Var::new(data, Vec::new(), None, false)
    }

    pub(crate) fn from_op(data: ArrayD<f64>, parents: Vec<Var>, op: Box<dyn Op>) -> Var {
        let requires = parents.iter().any(|p| p.requires_grad());
        if requires {
            Var::new(data, parents, Some(op), true)
        } else {
            Var::new(data, Vec::new(), None, false)
        }
    }

    /// Same data, cut off from the graph.
    pub fn detach(&self) -> Var {
        Var {
            node: Rc::new(Node {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                data: Arc::clone(&self.node.data),
                parents: RefCell::new(Vec::new()),
                op: None,
                requires_grad: false,
            }),
        }
    }

    pub fn id(&self) -> u64 {
        self.node.id
    }

    pub fn requires_grad(&self) -> bool {
        self.node.requires_grad
    }

    pub fn array(&self) -> &ArrayD<f64> {
        &self.node.data
    }

    pub fn shape(&self) -> &[usize] {
        self.node.data.shape()
    }

    pub fn scalar(&self) -> f64 {
        debug_assert_eq!(self.node.data.len(), 1, "scalar() on non-scalar Var");
        *self.node.data.iter().next().unwrap()
    }
}

/// Gradient of a scalar `loss` w.r.t. each of `wrt`.
///
/// With `create_graph = true` the returned `Var`s carry their own graph and
/// can be differentiated again. Leaves in `wrt` that the loss does not depend
/// on get zero gradients.
pub fn grad(loss: &Var, wrt: &[Var], create_graph: bool) -> Vec<Var> {
    assert_eq!(loss.array().len(), 1, "grad: loss must be a scalar");

    // Forward-topological order: parents before consumers.
    let topo = toposort(loss);

    let wrt_ids: std::collections::HashSet<u64> = wrt.iter().map(|v| v.id()).collect();

    // A node "needs" a gradient when a wrt leaf is reachable below it.
    let mut needs: HashMap<u64, bool> = HashMap::with_capacity(topo.len());
    for v in &topo {
        let mut n = wrt_ids.contains(&v.id());
        if !n {
            n = v
                .node
                .parents
                .borrow()
                .iter()
                .any(|p| *needs.get(&p.id()).unwrap_or(&false));
        }
        needs.insert(v.id(), n);
    }

    let mut grads: HashMap<u64, Var> = HashMap::new();
    let seed = Var::constant(ArrayD::ones(loss.shape().to_vec()));
    grads.insert(loss.id(), seed);

    for v in topo.iter().rev() {
        if !needs[&v.id()] {
            continue;
        }
        let g = match grads.get(&v.id()) {
            Some(g) => g.clone(),
            None => continue, // no path from the loss to this node
        };
        let op = match &v.node.op {
            Some(op) => op,
            None => continue,
        };
        let parents = v.node.parents.borrow().clone();
        let wants: Vec<bool> = parents
            .iter()
            .map(|p| *needs.get(&p.id()).unwrap_or(&false))
            .collect();
        let (p_in, out_in, g_in): (Vec<Var>, Var, Var) = if create_graph {
            (parents.clone(), v.clone(), g)
        } else {
            (
                parents.iter().map(|p| p.detach()).collect(),
                v.detach(),
                g.detach(),
            )
        };
        let pg = op.vjp(&p_in, &out_in, &g_in, &wants);
        debug_assert_eq!(pg.len(), parents.len(), "vjp arity mismatch in {}", op.name());
        for (i, (parent, pgrad)) in parents.iter().zip(pg).enumerate() {
            if !wants[i] {
                continue;
            }
            let pgrad = match pgrad {
                Some(g) => g,
                None => continue,
            };
            debug_assert_eq!(
                pgrad.shape(),
                parent.shape(),
                "vjp shape mismatch in {}",
                op.name()
            );
            match grads.remove(&parent.id()) {
                Some(acc) => {
                    grads.insert(parent.id(), add(&acc, &pgrad));
                }
                None => {
                    grads.insert(parent.id(), pgrad);
                }
            }
        }
    }

    wrt.iter()
        .map(|v| match grads.get(&v.id()) {
            Some(g) => g.clone(),
            None => Var::constant(ArrayD::zeros(v.shape().to_vec())),
        })
        .collect()
}

fn toposort(root: &Var) -> Vec<Var> {
    let mut order: Vec<Var> = Vec::new();
    let mut state: HashMap<u64, u8> = HashMap::new(); // 1 = in progress, 2 = done
    let mut stack: Vec<(Var, bool)> = vec![(root.clone(), false)];
    while let Some((v, expanded)) = stack.pop() {
        let id = v.id();
        if expanded {
            state.insert(id, 2);
            order.push(v);
            continue;
        }
        match state.get(&id) {
            Some(_) => continue,
            None => {}
        }
        state.insert(id, 1);
        stack.push((v.clone(), true));
        for p in v.node.parents.borrow().iter() {
            if !state.contains_key(&p.id()) {
                stack.push((p.clone(), false));
            }
        }
    }
    order
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr1;

    fn v1(vals: &[f64]) -> Var {
        Var::param(arr1(vals).into_dyn())
    }

    #[test]
    fn add_mul_grad() {
        let x = v1(&[2.0, 3.0]);
        let y = v1(&[5.0, 7.0]);
        let z = sum_all(&mul(&add(&x, &y), &x)); // sum x*(x+y)
        let g = grad(&z, &[x.clone(), y.clone()], false);
        // dz/dx = 2x + y, dz/dy = x
        assert_eq!(g[0].array().as_slice().unwrap(), &[9.0, 13.0]);
        assert_eq!(g[1].array().as_slice().unwrap(), &[2.0, 3.0]);
    }

    #[test]
    fn grad_of_grad() {
        // f = sum(x^3); f' = 3x^2; f'' diag = 6x, checked via sum(f')
        let x = v1(&[1.0, 2.0]);
        let f = sum_all(&mul(&mul(&x, &x), &x));
        let g = grad(&f, &[x.clone()], true);
        let s = sum_all(&g[0]);
        let gg = grad(&s, &[x.clone()], false);
        assert_eq!(gg[0].array().as_slice().unwrap(), &[6.0, 12.0]);
    }

    #[test]
    fn constant_paths_are_pruned() {
        let x = Var::constant(arr1(&[1.0, 2.0]).into_dyn());
        let y = mul(&x, &x);
        assert!(!y.requires_grad());
        assert!(y.node.op.is_none());
    }

    #[test]
    fn unrelated_leaf_gets_zeros() {
        let x = v1(&[1.0]);
        let y = v1(&[1.0]);
        let f = sum_all(&mul(&x, &x));
        let g = grad(&f, &[y.clone()], false);
        assert_eq!(g[0].array().as_slice().unwrap(), &[0.0]);
    }

    #[test]
    fn deep_graph_drops_without_overflow() {
        let mut x = v1(&[1.0]);
        for _ in 0..200_000 {
            x = add_scalar(&x, 1.0);
        }
        drop(x);
    }
}
