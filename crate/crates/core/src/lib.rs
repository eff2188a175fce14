//! Random multimodel deep learning: ensembles of randomly configured DNN, CNN
//! and RNN classifiers combined by majority vote.

pub mod data;
pub mod features;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod rmdl;
pub mod tensor;
