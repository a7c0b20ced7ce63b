//! Loads MNIST (and CIFAR-10 when present), prints checksums, and shows
//! the deterministic batch order.
//!
//! ```text
//! cargo run --release --example load_datasets -- [mnist_dir] [cifar_dir]
//! ```

use std::path::PathBuf;

use cimsim::dataio::{batches, load_cifar10, load_mnist, Split};

fn main() -> cimsim::Result<()> {
    let mut args = std::env::args().skip(1);
    let mnist = PathBuf::from(args.next().unwrap_or_else(|| "data/mnist".into()));
    for split in [Split::Train, Split::Test] {
        let ds = load_mnist(&mnist, split)?;
        println!("MNIST {split:?}: {} images of {:?}", ds.len(), ds.image_shape);
        for c in &ds.checksums {
            println!("  {} {}", c.sha256, c.file);
        }
    }
    let order = batches(60_000, 200, 1, true)?;
    println!("60000 images, batch 200: {} iterations; first batch starts {:?}", order.len(), &order[0][..5]);

    if let Some(dir) = args.next() {
        let ds = load_cifar10(&PathBuf::from(dir), Split::Train)?;
        println!("CIFAR-10 train: {} images of {:?}", ds.len(), ds.image_shape);
    }
    Ok(())
}
