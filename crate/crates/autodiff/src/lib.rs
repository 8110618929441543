//! Reverse-mode automatic differentiation over dense 2-D `f64` arrays.
//!
//! The graph is rebuilt for every forward pass (define-by-run): ops append
//! nodes to a [`Graph`] arena, [`Graph::backward`] walks the arena in
//! reverse, and [`Graph::accumulate_param_grads`] folds leaf gradients into a
//! persistent [`ParameterSet`] that [`Adam`] then updates.
//!
//! ```
//! use ppn_autodiff::{Adam, Array, Graph, ParameterSet};
//!
//! let mut params = ParameterSet::new();
//! params.insert("w", Array::row_vector(vec![1.0, -2.0]).unwrap()).unwrap();
//!
//! let mut g = Graph::new();
//! let w = g.param(&params, "w").unwrap();
//! let sq = g.mul(w, w).unwrap();
//! let loss = g.sum(sq).unwrap();
//! g.backward(loss).unwrap();
//! g.accumulate_param_grads(&mut params).unwrap();
//! assert_eq!(params.grad("w").unwrap().as_slice(), &[2.0, -4.0]);
//!
//! Adam::new(1e-3).step(&mut params).unwrap();
//! ```

mod array;
mod error;
pub mod gradcheck;
mod graph;
mod optim;
mod params;

pub use array::Array;
pub use error::{AutodiffError, Result};
pub use gradcheck::{gradient_check, GradCheckReport, ParamCheck};
pub use graph::{Graph, Var, LOG_FLOOR};
pub use optim::Adam;
pub use params::{Parameter, ParameterSet};
