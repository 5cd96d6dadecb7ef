use std::path::PathBuf;

use ebm_core::data::{load_mnist_idx, Split, MNIST_CLASSES};

fn dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist-5k")
}

#[test]
fn bundled_sample_loads() {
    let train = load_mnist_idx(dir().join("train-images-idx3-ubyte.gz"), dir().join("train-labels-idx1-ubyte.gz")).unwrap();
    let test = load_mnist_idx(dir().join("t10k-images-idx3-ubyte.gz"), dir().join("t10k-labels-idx1-ubyte.gz")).unwrap();
    assert_eq!((train.len(), test.len()), (4_000, 1_000));
    assert_eq!((train.split, test.split), (Split::Train, Split::Test));
    let mut counts = [0usize; MNIST_CLASSES];
    for s in train.samples.iter().chain(&test.samples) {
        assert_eq!(s.input.len(), 784);
        assert!(s.input.iter().all(|&p| (0.0..=1.0).contains(&p)));
        assert_eq!(s.target.sum(), 1.0);
        counts[s.label()] += 1;
    }
    // Every digit is represented.
    assert!(counts.iter().all(|&c| c > 300), "{counts:?}");
}
