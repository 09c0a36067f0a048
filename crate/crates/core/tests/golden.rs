//! Frozen reference values for the desk benchmarks, with independent
//! recomputation where one is cheap.

use geoward::dataset::{subsample, Split, SynthSpec};
use geoward::linalg::{sym_eigen, SymMatrix};
use geoward::metric::{assemble_metric, DEFAULT_THRESHOLD};
use geoward::network::{jacobian, Activation, OutputMode};
use geoward::training::{train, Loss, TrainConfig};
use geoward::{FlatWeights, NetworkSpec};

fn reference() -> (NetworkSpec, FlatWeights, geoward::dataset::Dataset) {
    let data = SynthSpec {
        classes: 3,
        dim: 10,
        per_class: 200,
        separation: 3.0,
        seed: 100,
    }
    .generate(Split::Train)
    .unwrap();
    let spec = NetworkSpec::new(vec![10, 16, 3], Activation::Tanh, OutputMode::Softmax).unwrap();
    let cfg = TrainConfig {
        epochs: 100,
        batch_size: 16,
        learning_rate: 0.1,
        seed: 0,
        loss: Loss::CrossEntropy,
    };
    let (w, _) = train(&spec, &data, &cfg).unwrap();
    let batch = subsample(&data, 256, 0).unwrap();
    (spec, w, batch)
}

#[test]
fn trained_network_is_mostly_resilient() {
    let (spec, w, batch) = reference();
    let s = assemble_metric(&spec, &w, &batch)
        .unwrap()
        .spectrum(DEFAULT_THRESHOLD)
        .unwrap();
    assert_eq!(s.vulnerable_count(), 14);
    assert_eq!(s.rho(), 14.0 / 227.0);
    assert!((s.lambda_max() - 0.12110305808785526).abs() <= 1e-9 * 0.1211);

    // independent assembly straight from per-example Jacobian blocks
    let n = spec.n_weights();
    let mut g = vec![0.0; n * n];
    for (x, &id) in batch.inputs().iter().zip(batch.ids()) {
        let j = jacobian(&spec, &w, x, id).unwrap();
        for r in 0..j.rows {
            let row = j.row(r);
            for a in 0..n {
                for b in 0..n {
                    g[a * n + b] += row[a] * row[b];
                }
            }
        }
    }
    g.iter_mut().for_each(|v| *v /= batch.len() as f64);
    let eig = sym_eigen(&SymMatrix::from_rows(n, g).unwrap()).unwrap();
    let recount = eig.values.iter().filter(|&&l| l >= DEFAULT_THRESHOLD).count();
    assert_eq!(recount, s.vulnerable_count());
    // most directions barely move the function
    assert!(s.rho() < 0.1);
}
