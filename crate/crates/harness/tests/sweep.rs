use kvfreeze::config::{RunConfig, SweepSection};
use kvfreeze::sweep::{format_table, run_sweep, SweepSource};
use kvfreeze_core::{replay, synth_trace, SynthKind};

#[test]
fn smaller_softness_never_compresses_less() {
    let trace = synth_trace(SynthKind::Stress, 300, 8);
    let cfg = RunConfig {
        sweep: SweepSection {
            softness: vec![1.0, 2.0],
            tau: vec![0.2, 0.5, 1.0],
            ..Default::default()
        },
        ..Default::default()
    };
    let rows = run_sweep(&cfg, SweepSource::Replay(&trace)).unwrap();
    assert_eq!(rows.len(), 6);
    for pair in rows.chunks(2) {
        assert_eq!(
            (pair[0].params.softness, pair[1].params.softness),
            (1.0, 2.0)
        );
        assert!(pair[0].mean_compression >= pair[1].mean_compression);
    }
}

#[test]
fn zero_threshold_on_positive_scores_never_freezes() {
    let mut trace = synth_trace(SynthKind::Stress, 200, 1);
    for st in &mut trace.steps {
        st.scores.iter_mut().for_each(|s| s.1 += 1e-3);
    }
    let mut cfg = RunConfig::default();
    cfg.sweep.tau = vec![0.0];
    cfg.sweep.window_size = vec![4, 16];
    let rows = run_sweep(&cfg, SweepSource::Replay(&trace)).unwrap();
    assert!(rows
        .iter()
        .all(|r| r.mean_compression == 0.0 && r.max_absence == 0));
}

#[test]
fn singleton_grid_equals_direct_run() {
    let trace = synth_trace(SynthKind::Stress, 250, 3);
    let mut cfg = RunConfig::default();
    cfg.sweep.history_window = vec![64];
    let rows = run_sweep(&cfg, SweepSource::Replay(&trace)).unwrap();
    let params = kvfreeze_core::PolicyParams {
        history_window: 64,
        ..Default::default()
    };
    let direct = replay(&trace, &params).unwrap();
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0].params, params);
    assert_eq!(rows[0].mean_compression, direct.mean_compression());
    assert_eq!(rows[0].max_absence, direct.max_absence());
}

#[test]
fn generation_sweep_is_deterministic() {
    let mut cfg = RunConfig::default();
    cfg.run.steps = 60;
    cfg.sweep.window_size = vec![8, 32];
    let a = format_table(&run_sweep(&cfg, SweepSource::Generate).unwrap());
    let b = format_table(&run_sweep(&cfg, SweepSource::Generate).unwrap());
    assert_eq!(a, b);
    assert_eq!(a.lines().count(), 3);
}
