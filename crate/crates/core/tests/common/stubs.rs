//! Hand-built linear members over one-hot inputs, for exact voting checks.

use rmdl_core::features::FeatureSet;
use rmdl_core::nn::{Dense, Network};
use rmdl_core::optim::{Optimizer, OptimizerKind};
use rmdl_core::rmdl::{
    ArchitectureSpec, Body, Ensemble, EnsembleConfig, Family, InputDescriptor, Member, Preprocessor, VoteMode,
};
use rmdl_core::tensor::Tensor;

pub fn input(k: usize) -> InputDescriptor {
    InputDescriptor::Image {
        height: 1,
        width: k,
        channels: 1,
    }
}

/// A single dense layer `K -> K` with the given weights.
pub fn linear_member(id: usize, k: usize, weight: Vec<f64>, bias: Vec<f64>) -> Member {
    let spec = ArchitectureSpec {
        family: Family::Dnn,
        seed: id as u64,
        input: input(k),
        classes: k,
        optimizer: OptimizerKind::Adam,
        learning_rate: 1e-3,
        body: Body::Dnn { hidden: Vec::new() },
    };
    let dense = Dense::from_params(
        Tensor::from_values(&[k, k], weight).unwrap(),
        Tensor::from_values(&[k], bias).unwrap(),
    )
    .unwrap();
    let network = Network::new(vec![dense.into()]);
    Member {
        id,
        spec,
        network,
        optimizer: Optimizer::with_defaults(OptimizerKind::Adam),
        failed: false,
    }
}

/// Maps one-hot class `i` to class `(i + shift) % k` with logit gap `scale`.
pub fn shift_member(id: usize, k: usize, shift: usize, scale: f64) -> Member {
    let mut w = vec![0.0; k * k];
    for i in 0..k {
        w[i * k + (i + shift) % k] = scale;
    }
    linear_member(id, k, w, vec![0.0; k])
}

/// Ignores its input and always answers `label` with near certainty.
pub fn constant_member(id: usize, k: usize, label: usize) -> Member {
    let mut b = vec![0.0; k];
    b[label] = 50.0;
    linear_member(id, k, vec![0.0; k * k], b)
}

pub fn onehot_set(labels: &[usize], k: usize) -> FeatureSet {
    let mut data = vec![0.0; labels.len() * k];
    for (i, &l) in labels.iter().enumerate() {
        data[i * k + l] = 1.0;
    }
    FeatureSet::Image {
        images: Tensor::from_values(&[labels.len(), 1, k, 1], data).unwrap(),
    }
}

pub fn ensemble(k: usize, vote: VoteMode, members: Vec<Member>) -> Ensemble {
    let config = EnsembleConfig {
        dnn: members.len(),
        cnn: 0,
        rnn: 0,
        vote,
        ..EnsembleConfig::default()
    };
    let classes = (0..k).map(|c| c.to_string()).collect();
    let pre = Preprocessor::Image {
        height: 1,
        width: k,
        channels: 1,
    };
    Ensemble::from_members(config, pre, classes, members).unwrap()
}

/// Three weakly confident correct members plus two confidently wrong
/// stubs. With `constant` the stubs always answer class 0 and the labels
/// avoid it; otherwise both answer `(truth + 1) % k`.
pub fn robustness_case(k: usize, constant: bool, items: usize) -> (Ensemble, FeatureSet, Vec<usize>) {
    let labels: Vec<usize> = if constant {
        (0..items).map(|i| 1 + i % (k - 1)).collect()
    } else {
        (0..items).map(|i| i % k).collect()
    };
    let mut members: Vec<Member> = (0..3).map(|id| shift_member(id, k, 0, 0.2)).collect();
    for id in 3..5 {
        members.push(if constant {
            constant_member(id, k, 0)
        } else {
            shift_member(id, k, 1, 50.0)
        });
    }
    let features = onehot_set(&labels, k);
    (ensemble(k, VoteMode::Auto, members), features, labels)
}
