use kvfreeze_core::scheduler::detection_count;
use kvfreeze_core::trace::SYNTH_PROMPT_LEN;
use kvfreeze_core::{
    replay, synth_trace, NeedleLayout, PolicyEvent, PolicyParams, Replayer, Residency, SynthKind,
};

/// Independent event simulation of the all-cold case: per token, a detection
/// log and a freeze interval, nothing shared with the ledger code.
fn cold_oracle(
    steps: u64,
    prompt: usize,
    window: usize,
    softness: f64,
    history: u64,
) -> Vec<usize> {
    #[derive(Clone, Default)]
    struct Tok {
        log: Vec<u64>,
        frozen_from: u64,
        frozen_len: u64,
    }
    let mut toks: Vec<Tok> = Vec::new();
    let mut active = Vec::new();
    for t in 1..=steps {
        let n = prompt + t as usize;
        toks.resize(n, Tok::default());
        for tok in toks.iter_mut().take(n.saturating_sub(window)) {
            // Scored at t only if it took part in step t's forward pass.
            let absent = tok.frozen_len > 0 && t <= tok.frozen_from + tok.frozen_len;
            if absent {
                continue;
            }
            tok.log.push(t);
            let c = tok.log.iter().filter(|&&s| t - s < history).count() as f64;
            let d = (c.sqrt() / softness).floor() as u64;
            if d > 0 {
                tok.frozen_from = t;
                tok.frozen_len = d;
            }
        }
        let frozen = toks
            .iter()
            .filter(|k| k.frozen_len > 0 && k.frozen_from <= t && t < k.frozen_from + k.frozen_len)
            .count();
        active.push(n - frozen);
    }
    active
}

#[test]
fn cold_trace_matches_timer_oracle() {
    let params = PolicyParams::default();
    let stats = replay(&synth_trace(SynthKind::Cold, 500, 0), &params).unwrap();
    let oracle = cold_oracle(500, SYNTH_PROMPT_LEN, 32, 2.0, 128);
    let got: Vec<usize> = stats.rows.iter().map(|r| r.active).collect();
    for (g, o) in got.iter().zip(&oracle) {
        assert!(g.abs_diff(*o) <= 2, "{g} vs {o}");
    }
    let mean = |v: &[usize]| v[100..].iter().sum::<usize>() as f64 / (v.len() - 100) as f64;
    assert!((mean(&got) - mean(&oracle)).abs() <= 2.0);
}

#[test]
fn cold_trace_with_unbounded_history() {
    let params = PolicyParams {
        history_window: u64::MAX,
        ..Default::default()
    };
    let stats = replay(&synth_trace(SynthKind::Cold, 300, 0), &params).unwrap();
    let oracle = cold_oracle(300, SYNTH_PROMPT_LEN, 32, 2.0, u64::MAX);
    let got: Vec<usize> = stats.rows.iter().map(|r| r.active).collect();
    assert_eq!(got, oracle);
}

#[test]
fn stress_trace_freezes_and_restores_with_bounded_absence() {
    let stats = replay(
        &synth_trace(SynthKind::Stress, 500, 1),
        &PolicyParams::default(),
    )
    .unwrap();
    assert!(stats.freeze_count() > 0 && stats.restore_count() > 0);
    assert!(stats.max_absence() <= 5);
}

#[test]
fn needle_recovered_soon_after_query() {
    let len = 500;
    let layout = NeedleLayout::for_length(len);
    let trace = synth_trace(SynthKind::Needle, len, 2);
    let params = PolicyParams::default();
    let mut r = Replayer::new(params).unwrap();
    let bound = params.max_duration().unwrap();
    for st in &trace.steps {
        r.push(st).unwrap();
        if st.step >= layout.query_step + bound {
            assert_eq!(
                r.ledger().residency(layout.position),
                Some(Residency::Active)
            );
        }
    }
    let stats = r.finish();
    let episodes = stats.absences.get(&layout.position).map_or(0, Vec::len) as u64;
    let absent: u64 = stats
        .absences
        .get(&layout.position)
        .into_iter()
        .flatten()
        .sum();
    assert!(episodes > 0);
    assert!(absent <= episodes * bound);
}

#[test]
fn topic_shift_releases_old_cold_tokens() {
    let len = 400usize;
    let mid = len as u64 / 2;
    let params = PolicyParams::default();
    let trace = synth_trace(SynthKind::TopicShift, len, 0);
    let mut r = Replayer::new(params).unwrap();
    let mut frozen_before = Vec::new();
    for st in &trace.steps {
        r.push(st).unwrap();
        let ledger = r.ledger();
        if st.step == mid - 1 {
            frozen_before = ledger.frozen_positions().collect();
            assert!(!frozen_before.is_empty());
            assert!(frozen_before.iter().all(|p| p % 2 == 0));
        }
        if st.step == mid + 5 {
            for &p in &frozen_before {
                assert_eq!(ledger.residency(p), Some(Residency::Active), "token {p}");
            }
        }
        if st.step == mid + params.history_window {
            for &p in &frozen_before {
                assert_eq!(
                    detection_count(ledger.record(p).unwrap(), st.step, params.history_window),
                    0
                );
            }
        }
    }
    for e in &r.stats().events {
        if let PolicyEvent::Freeze { step, position, .. } = *e {
            if step >= mid {
                assert!(
                    !frozen_before.contains(&position),
                    "token {position} refrozen at {step}"
                );
            }
        }
    }
}

#[test]
fn gentler_schedule_compresses_more() {
    for kind in [SynthKind::Stress, SynthKind::Cold] {
        let trace = synth_trace(kind, 400, 3);
        let with = |k: f64| {
            let p = PolicyParams {
                softness: k,
                ..Default::default()
            };
            replay(&trace, &p).unwrap().mean_compression()
        };
        assert!(with(1.0) >= with(2.0));
    }
}
