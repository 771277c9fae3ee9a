//! Deterministic SVG and 17-digit JSON artifacts.
//!
//! ```bash
//! cargo run --release --example plot -- out/plot.svg
//! ```

use tfapprox::report::*;
use tfapprox::scaling::{fit_power_law, synthetic_loss_curve, FitMode};

fn main() -> tfapprox::Result<()> {
    let path = std::env::args().nth(1).unwrap_or_else(|| "plot.svg".into());
    let pts = synthetic_loss_curve(2.0, 0.3, (1e2, 1e7), 12, 0.02, 1)?;
    let fit = fit_power_law(&pts, FitMode::Plain)?;
    let (a, b) = (pts[0].0, pts[pts.len() - 1].0);
    let series = [
        Series::markers("loss", pts),
        Series::line(format!("slope {:.3}", -fit.exponent), vec![(a, fit.predict(a)), (b, fit.predict(b))]),
    ];
    let labels = Labels { title: "loss vs n".into(), x: "n".into(), y: "loss".into() };
    emit_plot(&series, Scale::LogLog, &labels, std::path::Path::new(&path))?;
    println!("wrote {path}");

    let mut report = Report::new("plot", &serde_json::json!({ "points": 12 }))?;
    report.check(Check::near("exponent", fit.exponent, 0.3, 0.02));
    print!("{}", to_json_string(&report, true)?);
    Ok(())
}
