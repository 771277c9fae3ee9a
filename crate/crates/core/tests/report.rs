use proptest::prelude::*;
use tfapprox::report::*;
use tfapprox::scaling::{fit_power_law, synthetic_loss_curve, FitMode};
use tfapprox::Error;

fn count(hay: &str, needle: &str) -> usize {
    hay.matches(needle).count()
}

/// Pixel coordinates of the `k`-th polyline in an SVG.
fn polyline(svg: &str, k: usize) -> Vec<(f64, f64)> {
    let line = svg.lines().filter(|l| l.starts_with("<polyline")).nth(k).unwrap();
    let start = line.find("points=\"").unwrap() + 8;
    let end = start + line[start..].find('"').unwrap();
    line[start..end]
        .split(' ')
        .map(|p| {
            let (x, y) = p.split_once(',').unwrap();
            (x.parse().unwrap(), y.parse().unwrap())
        })
        .collect()
}

#[test]
fn two_points_give_two_glyphs_and_one_line() {
    let svg = render_svg(&[Series::markers("data", vec![(1.0, 2.0), (10.0, 0.5)])], Scale::LogLog, &Labels::default()).unwrap();
    assert_eq!(count(&svg, "<circle"), 2);
    assert_eq!(count(&svg, "<polyline"), 1);
    let line_only = render_svg(&[Series::line("fit", vec![(1.0, 2.0), (10.0, 0.5)])], Scale::LogLog, &Labels::default()).unwrap();
    assert_eq!(count(&line_only, "<circle"), 0);
}

#[test]
fn rendering_is_byte_identical() {
    let s = vec![Series::markers("a", vec![(1.0, 1.0), (2.0, 4.0), (3.0, 9.0)]), Series::line("b", vec![(1.0, 2.0), (3.0, 1.0)])];
    let labels = Labels { title: "t <x>".into(), x: "n".into(), y: "loss".into() };
    let a = render_svg(&s, Scale::Linear, &labels).unwrap();
    assert_eq!(a, render_svg(&s, Scale::Linear, &labels).unwrap());
    assert!(a.contains("t &lt;x&gt;"));
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("p.svg");
    emit_plot(&s, Scale::Linear, &labels, &p).unwrap();
    assert_eq!(std::fs::read_to_string(&p).unwrap(), a);
}

#[test]
fn log_plot_rejects_nonpositive_data() {
    let bad = [Series::markers("x", vec![(1.0, 1.0), (2.0, 0.0)])];
    assert!(matches!(render_svg(&bad, Scale::LogLog, &Labels::default()), Err(Error::Domain(_))));
    assert!(render_svg(&bad, Scale::Linear, &Labels::default()).is_ok());
    assert!(matches!(render_svg(&[], Scale::Linear, &Labels::default()), Err(Error::InsufficientData(_))));
}

#[test]
fn fitted_line_slope_in_plot_matches_exponent() {
    let pts = synthetic_loss_curve(2.0, 0.37, (1e3, 1e9), 25, 0.01, 5).unwrap();
    let fit = fit_power_law(&pts, FitMode::Plain).unwrap();
    let ends = [pts[0].0, pts[pts.len() - 1].0];
    let line: Vec<(f64, f64)> = ends.iter().map(|&n| (n, fit.coefficient * n.powf(-fit.exponent))).collect();
    let series = [Series::markers("loss", pts), Series::line("fit", line)];
    let svg = render_svg(&series, Scale::LogLog, &Labels::default()).unwrap();
    let frame = PlotFrame::fit(&series, Scale::LogLog).unwrap();
    let (sx, sy) = frame.pixels_per_unit();
    let px = polyline(&svg, 1);
    let pixel_slope = (px[1].1 - px[0].1) / (px[1].0 - px[0].0);
    // y grows downward on screen.
    let slope = -pixel_slope * sx / sy;
    assert!((slope + fit.exponent).abs() < 1e-3, "{slope} vs {}", fit.exponent);
    let m = frame.map(ends[0], fit.coefficient * ends[0].powf(-fit.exponent));
    assert!((m.0 - px[0].0).abs() < 1e-3 && (m.1 - px[0].1).abs() < 1e-3);
}

#[test]
fn report_json_has_17_digits_and_tolerances() {
    let mut r = Report::new("demo", &serde_json::json!({ "eps": 0.1 })).unwrap();
    r.check(Check::near("third", 1.0 / 3.0, 0.3333, 1e-4));
    r.check(Check::at_most("bound", 2.0, 1.0));
    r.info("size", 7).unwrap();
    let text = to_json_string(&r, true).unwrap();
    assert!(text.contains("3.3333333333333331e-1"), "{text}");
    assert!(text.contains("\"tolerance\": 1.0000000000000000e-4"));
    assert!(text.contains("\"bound\": 1.0000000000000000e0"));
    assert!(!r.pass);
    assert_eq!(r.failures().len(), 1);
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert_eq!(v["checks"][0]["value"].as_f64().unwrap(), 1.0 / 3.0);
    assert_eq!(v["checks"][0]["criterion"]["kind"], "near");
    assert_eq!(v["info"]["size"], 7);
}

#[test]
fn csv_rows_must_match_header() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("t.csv");
    write_csv(&p, &["a", "b"], &[vec![0.1, 2.0]]).unwrap();
    assert_eq!(std::fs::read_to_string(&p).unwrap(), "a,b\n1.0000000000000001e-1,2.0000000000000000e0\n");
    assert!(matches!(write_csv(&p, &["a"], &[vec![1.0, 2.0]]), Err(Error::Dimension(_))));
}

proptest! {
    #[test]
    fn sig17_round_trips(v in any::<f64>().prop_filter("finite", |v| v.is_finite())) {
        let s = sig17(v);
        prop_assert_eq!(s.parse::<f64>().unwrap().to_bits(), v.to_bits());
        let mantissa = s.split('e').next().unwrap().trim_start_matches('-').replace('.', "");
        prop_assert_eq!(mantissa.len(), 17);
    }

    #[test]
    fn json_floats_round_trip(v in -1e300f64..1e300) {
        let text = to_json_string(&vec![v], false).unwrap();
        let back: Vec<f64> = serde_json::from_str(&text).unwrap();
        prop_assert_eq!(back[0].to_bits(), v.to_bits());
    }
}
