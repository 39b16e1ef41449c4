//! Causal alignment training for small classifiers.
//!
//! A classifier is trained so that the input coordinates its counterfactuals
//! modify stay inside expert-annotated masks. The alignment penalty depends
//! on the counterfactual only through an inner argmin, so its parameter
//! gradient is obtained with the implicit function theorem: a
//! conjugate-gradient solve against finite-difference Hessian-vector
//! products, followed by one mixed-derivative product.

pub mod autodiff;
pub mod causal_attrib;
pub mod counterfactual;
pub mod error;
pub mod harness;
pub mod implicit_align;
pub mod linsolve;
pub mod pipeline;
pub mod report;
pub mod synthdata;

pub use error::{Error, Result};
