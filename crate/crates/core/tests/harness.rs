use laser_core::sim::{
    run_experiment, ExperimentConfig, LoadReset, Phase, Policy, Trace, TraceHeader, TraceRecord,
    WeightScheme, Workload,
};
use laser_core::{BandParams, Params, RoutePath, Scores, TrimMode};

const T0: [f64; 4] = [0.4, 0.3, 0.2, 0.1];
const T1: [f64; 4] = [0.35, 0.3, 0.25, 0.1];
const T2: [f64; 4] = [0.25, 0.25, 0.25, 0.25];
const T3: [f64; 4] = [0.1, 0.2, 0.3, 0.4];
const T4: [f64; 4] = [0.3, 0.3, 0.2, 0.2];
const T5: [f64; 4] = [0.3, 0.1, 0.3, 0.3];

fn record(layer: u16, token: u32, s: [f64; 4]) -> TraceRecord {
    TraceRecord {
        batch: 0,
        layer,
        token,
        phase: Phase::Decode,
        scores: Scores::new(s.to_vec()).unwrap(),
    }
}

/// Two layers, six tokens; layer 1 sees the layer-0 tokens in reverse order.
/// Records are stored shuffled to exercise in-memory sorting.
fn small_trace() -> Trace {
    let tokens = [T0, T1, T2, T3, T4, T5];
    let mut records = Vec::new();
    for (t, s) in tokens.iter().enumerate().rev() {
        records.push(record(1, t as u32, tokens[5 - t]));
        records.push(record(0, t as u32, *s));
    }
    Trace {
        header: TraceHeader {
            num_experts: 4,
            num_layers: 2,
            phase_present: true,
        },
        records,
    }
}

fn laser() -> Policy {
    Policy::Laser(BandParams::uniform(Params::new(2, 0.68, 0.5, 3, TrimMode::Top, 0), 2).unwrap())
}

#[test]
fn hand_stepped_small_instance() {
    let out = run_experiment(&ExperimentConfig::new(
        Workload::Trace(small_trace()),
        2,
        laser(),
    ))
    .unwrap();
    let batch = &out.primary.batches[0];
    assert_eq!(batch.counts.row(0), &[4, 3, 3, 2]);
    assert_eq!(batch.counts.row(1), &[4, 4, 3, 1]);

    let layer0: Vec<_> = out
        .primary
        .decisions
        .iter()
        .filter(|d| d.layer == 0)
        .collect();
    let selected: Vec<Vec<usize>> = layer0.iter().map(|d| d.decision.selected.clone()).collect();
    assert_eq!(
        selected,
        [
            vec![0, 1],
            vec![2, 0],
            vec![1, 2],
            vec![3, 2],
            vec![0, 1],
            vec![3, 0]
        ]
    );
    let shape: Vec<(RoutePath, usize, usize)> = layer0
        .iter()
        .map(|d| {
            (
                d.decision.path,
                d.decision.pool_size,
                d.decision.working_set_size,
            )
        })
        .collect();
    use RoutePath::*;
    assert_eq!(
        shape,
        [
            (SkewedTopK, 2, 2),
            (Expanded, 3, 3),
            (Expanded, 4, 3),
            (SkewedTopK, 2, 2),
            (Expanded, 4, 3),
            (Expanded, 3, 3)
        ]
    );
    let layer1: Vec<Vec<usize>> = out
        .primary
        .decisions
        .iter()
        .filter(|d| d.layer == 1)
        .map(|d| d.decision.selected.clone())
        .collect();
    assert_eq!(
        layer1,
        [
            vec![0, 2],
            vec![1, 0],
            vec![3, 2],
            vec![1, 0],
            vec![1, 2],
            vec![0, 1]
        ]
    );

    // both layers peak at 4 against a mean of 3
    let i_agg = batch.report.i_agg.unwrap();
    assert!((i_agg - 4.0 / 3.0).abs() < 1e-15);
}

#[test]
fn decisions_follow_batch_layer_token_order() {
    let out = run_experiment(&ExperimentConfig::new(
        Workload::Trace(small_trace()),
        2,
        laser(),
    ))
    .unwrap();
    let keys: Vec<(u16, u32)> = out
        .primary
        .decisions
        .iter()
        .map(|d| (d.layer, d.token))
        .collect();
    let expected: Vec<(u16, u32)> = (0..2).flat_map(|l| (0..6).map(move |t| (l, t))).collect();
    assert_eq!(keys, expected);
}

#[test]
fn vanilla_on_small_instance() {
    let out = run_experiment(&ExperimentConfig::new(
        Workload::Trace(small_trace()),
        2,
        Policy::Vanilla,
    ))
    .unwrap();
    // top-2 of T0..T5: {0,1} {0,1} {0,1} {3,2} {0,1} {0,2}
    assert_eq!(out.primary.batches[0].counts.row(0), &[5, 4, 2, 1]);
}

#[test]
fn flop_weights_and_cumulative_mode() {
    let mut cfg = ExperimentConfig::new(Workload::Trace(small_trace()), 2, Policy::Vanilla);
    cfg.weights = WeightScheme::Flops(vec![1.0, 3.0]);
    cfg.load_reset = LoadReset::Cumulative;
    let out = run_experiment(&cfg).unwrap();
    let r = &out.primary.batches[0].report;
    let i0 = r.per_layer[0].unwrap().factor;
    let i1 = r.per_layer[1].unwrap().factor;
    assert!((r.i_agg.unwrap() - (0.25 * i0 + 0.75 * i1)).abs() < 1e-15);
}

#[test]
fn empty_layers_are_skipped() {
    let mut trace = small_trace();
    trace.header.num_layers = 3;
    let out = run_experiment(&ExperimentConfig::new(
        Workload::Trace(trace),
        2,
        Policy::Vanilla,
    ))
    .unwrap();
    let r = &out.primary.batches[0].report;
    assert_eq!(r.skipped_layers, 1);
    assert!(r.per_layer[2].is_none());
    assert!(r.i_agg.is_some());
}
