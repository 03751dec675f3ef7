//! Boosted mixed-effects model: a Newton-boosted tree ensemble over
//! atmospheric features acting as the mean of a spatial Gaussian process.

mod gpboost;
mod tree;

pub use gpboost::{
    gpboost_train, gpr_train, initial_kernel, train_arrays, train_boosting_only, train_gpr_arrays, BoostedEnsemble,
    GbConfig, GbFit, GbModel, MIN_TRAINING_SAMPLES,
};
pub use tree::{fit_tree, Node, RegressionTree, HESSIAN_FLOOR};
