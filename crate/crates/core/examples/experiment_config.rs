//! Prints the default experiment configuration as JSON, or the quick
//! variant with `--quick`. Redirect the output to a file, edit it, and pass
//! it to `cimsim transfer --config`.

use cimsim::harness::ExperimentConfig;

fn main() -> cimsim::Result<()> {
    let mut cfg = ExperimentConfig::default();
    if std::env::args().any(|a| a == "--quick") {
        cfg = cfg.quick();
    }
    println!("{}", cfg.to_json()?);
    Ok(())
}
