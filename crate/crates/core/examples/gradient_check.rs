//! Compares the analytic loss and head gradients against central finite
//! differences of an independent f64 reference.
//!
//!     cargo run --release --example gradient_check

use marginflow::gradcheck::{check_instance, head_backward_check, GradCheckShape, HeadCheckShape};
use marginflow::loss::{LossConfig, LossKind, TemperatureMode};

fn main() -> marginflow::Result<()> {
    println!(
        "{:<16} {:<9} {:>5} {:>12} {:>12}",
        "loss", "mode", "sigma", "max rel err", "max |grad|"
    );
    for kind in LossKind::ALL {
        for mode in [TemperatureMode::Multiply, TemperatureMode::Divide] {
            for sigma in [1.0, 20.0] {
                let cfg = LossConfig::new(kind, sigma, 0.4)?.with_temperature_mode(mode);
                let r = check_instance(&cfg, 7, GradCheckShape::default(), 1.0);
                println!(
                    "{:<16} {:<9} {:>5} {:>12.2e} {:>12.2e}",
                    kind.to_string(),
                    mode.to_string(),
                    sigma,
                    r.max_rel_error,
                    r.max_abs_analytic
                );
            }
        }
    }

    let cfg = LossConfig::default();
    let err = head_backward_check(&cfg, 3, HeadCheckShape::default());
    println!("\nloss through head (B=4, F=8, D=6): max rel err {err:.2e}");

    // a gradient that is off by 1% is caught
    let r = check_instance(&cfg, 7, GradCheckShape::default(), 1.01);
    println!(
        "analytic gradient scaled by 1.01: max rel err {:.2e}",
        r.max_rel_error
    );
    Ok(())
}
