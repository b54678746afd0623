use kvfreeze::chart::{polyline_points, render_svg};
use kvfreeze_core::{replay, synth_trace, PolicyParams, SynthKind};

/// Local extrema of a series after merging runs of equal values.
fn extrema(ys: &[f64]) -> (usize, usize) {
    let mut runs: Vec<f64> = Vec::new();
    for &y in ys {
        if runs.last() != Some(&y) {
            runs.push(y);
        }
    }
    let maxima = runs
        .windows(3)
        .filter(|w| w[1] > w[0] && w[1] > w[2])
        .count();
    let minima = runs
        .windows(3)
        .filter(|w| w[1] < w[0] && w[1] < w[2])
        .count();
    (minima, maxima)
}

#[test]
fn stress_chart_oscillates_after_warm_up() {
    let stats = replay(
        &synth_trace(SynthKind::Stress, 500, 1),
        &PolicyParams::default(),
    )
    .unwrap();
    let svg = render_svg(&stats.rows, "stress").unwrap();
    assert_eq!(svg.matches("<polyline").count(), 2);
    let pts = polyline_points(&svg, "policy").unwrap();
    // SVG y grows downward; extrema swap roles but both must exist.
    let (minima, maxima) = extrema(&pts.iter().skip(50).map(|p| p.1).collect::<Vec<_>>());
    assert!(minima >= 1 && maxima >= 1);
}

#[test]
fn chart_is_byte_identical_for_identical_metrics() {
    let stats = replay(
        &synth_trace(SynthKind::TopicShift, 300, 2),
        &PolicyParams::default(),
    )
    .unwrap();
    assert_eq!(
        render_svg(&stats.rows, "t").unwrap(),
        render_svg(&stats.rows, "t").unwrap()
    );
}
