//! Per-layer parameter and size table for an Xnor-Net ResNet-18.

use qprune::arch::resnet18;
use qprune::quant::QuantScheme;
use qprune::surgery::{format_kilo, format_mib};

fn main() -> qprune::Result<()> {
    let net = resnet18(QuantScheme::xnor(), false, 1000)?;
    let report = net.account();
    println!("{:<10} {:>10} {:>9}", "layer", "params", "MiB");
    for row in report.layers.iter().filter(|r| r.params > 0) {
        println!(
            "{:<10} {:>10} {:>9}",
            row.name,
            format_kilo(row.params),
            format_mib(row.size_mib())
        );
    }
    println!(
        "total: {} params, {} bits ({} MiB incl. scales and batch-norm)",
        report.total_params(),
        report.total_bits(),
        format_mib(report.total_mib())
    );
    Ok(())
}
