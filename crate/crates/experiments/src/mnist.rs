//! Locating MNIST files on disk.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use ebm_core::data::{load_mnist_idx, Dataset};

#[derive(Debug, Clone, PartialEq)]
pub struct MnistFiles {
    pub dir: PathBuf,
    pub train_images: PathBuf,
    pub train_labels: PathBuf,
    pub test_images: PathBuf,
    pub test_labels: PathBuf,
}

/// The 5,000-digit sample shipped with the repository.
pub fn bundled_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist-5k")
}

fn find(dir: &Path, stem: &str) -> Option<PathBuf> {
    let dotted = stem.replacen("-idx", ".idx", 1);
    [stem.to_string(), format!("{stem}.gz"), dotted.clone(), format!("{dotted}.gz")]
        .into_iter()
        .map(|n| dir.join(n))
        .find(|p| p.is_file())
}

/// The four standard files in `dir`, plain or gzipped.
pub fn find_mnist(dir: &Path) -> Option<MnistFiles> {
    Some(MnistFiles {
        dir: dir.to_path_buf(),
        train_images: find(dir, "train-images-idx3-ubyte")?,
        train_labels: find(dir, "train-labels-idx1-ubyte")?,
        test_images: find(dir, "t10k-images-idx3-ubyte")?,
        test_labels: find(dir, "t10k-labels-idx1-ubyte")?,
    })
}

/// Files from `dir` if given, else the bundled sample.
pub fn locate(dir: Option<&Path>) -> Result<(MnistFiles, bool)> {
    match dir {
        Some(d) => match find_mnist(d) {
            Some(f) => Ok((f, false)),
            None => bail!(
                "no MNIST IDX files (train-images-idx3-ubyte[.gz] etc.) in {}",
                d.display()
            ),
        },
        None => find_mnist(&bundled_dir())
            .map(|f| (f, true))
            .context("no data directory given and the bundled MNIST sample is missing"),
    }
}

/// Train and test sets truncated to the requested sizes.
pub fn load_subsets(files: &MnistFiles, train: usize, test: usize) -> Result<(Dataset, Dataset)> {
    let tr = load_mnist_idx(&files.train_images, &files.train_labels)
        .with_context(|| format!("loading {}", files.train_images.display()))?;
    let te = load_mnist_idx(&files.test_images, &files.test_labels)
        .with_context(|| format!("loading {}", files.test_images.display()))?;
    Ok((tr.truncated(train), te.truncated(test)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn finds_plain_and_gzipped_files() {
        let dir = tempfile::tempdir().unwrap();
        assert!(find_mnist(dir.path()).is_none());
        for f in ["train-images-idx3-ubyte", "train-labels.idx1-ubyte.gz", "t10k-images-idx3-ubyte.gz", "t10k-labels-idx1-ubyte"] {
            std::fs::write(dir.path().join(f), b"").unwrap();
        }
        let files = find_mnist(dir.path()).unwrap();
        assert!(files.train_labels.ends_with("train-labels.idx1-ubyte.gz"));
        assert!(locate(Some(Path::new("/nonexistent"))).is_err());
    }

    #[test]
    fn bundled_sample_is_found() {
        let (files, bundled) = locate(None).unwrap();
        assert!(bundled);
        let (train, test) = load_subsets(&files, 100, 10).unwrap();
        assert_eq!((train.len(), test.len()), (100, 10));
    }
}
