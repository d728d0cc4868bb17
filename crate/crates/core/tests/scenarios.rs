use eoslab::datagen::{generate, SpikeSpec};
use eoslab::dynamics::{
    forbidden_transitions, gradient_flow, relu_gd_train, FlowConfig, ModelState, Phase, PhaseInterval,
};
use eoslab::experiment::{matched_loss_sweep, SweepConfig};
use eoslab::models::{LinearNet, ReluNet};
use eoslab::theorychecks::{check_phase1_monotone, Outcome};

#[test]
fn gradient_flow_phase_one_is_monotone() {
    let ds = generate(&SpikeSpec::reference(0)).unwrap();
    let mut cfg = FlowConfig::new(0.014, 40.0, 0.1);
    cfg.record_every = 10;
    cfg.vector_every = Some(10);
    let init = ModelState::Full(LinearNet::init(ds.d(), 100, 1e-2, 0));
    let tr = gradient_flow(&init, &ds, &cfg).unwrap().trajectory;
    let ph = tr.phases(2).unwrap();
    let iv = ph.iter().find(|iv| iv.label == Phase::I).expect("phase I interval");
    let rep = check_phase1_monotone(&tr, iv, &ds, 1e-10, 1e-2).unwrap();
    assert_eq!(rep.outcome, Outcome::Pass, "{}", rep.line());
    assert!(!rep.vacuous);
}

#[test]
fn relu_first_layer_kernel_is_nearly_rank_two() {
    let ds = generate(&SpikeSpec::reference(0)).unwrap();
    let net = ReluNet::init(ds.d(), 400, 1e-2, 0);
    let (_, recs) = relu_gd_train(net, &ds, 0.005, 60, 60).unwrap();
    let last = recs.last().unwrap();
    assert_eq!(last.step, 60);
    assert!(last.rank2_ratio < 0.2, "lambda3/lambda2 = {}", last.rank2_ratio);
    assert!(last.loss < recs[0].loss);
}

/// Records whose label differs between two interval lists, ignoring records within `slack`
/// of any interval start.
fn relabelled(a: &[PhaseInterval], b: &[PhaseInterval], len: usize, slack: usize) -> Vec<usize> {
    let per_step = |ivs: &[PhaseInterval]| {
        let mut out = vec![ivs[0].label; len];
        for iv in ivs {
            out[iv.start..].fill(iv.label);
        }
        out
    };
    let (la, lb) = (per_step(a), per_step(b));
    let near = |t: usize| a.iter().chain(b).any(|iv| iv.start.abs_diff(t) <= slack);
    (0..len).filter(|&t| la[t] != lb[t] && !near(t)).collect()
}

// The late part of the run oscillates with period 2, so only windows of equal parity are
// expected to agree.
#[test]
fn reference_run_phases_are_stable_and_ordered() {
    let ds = generate(&SpikeSpec::reference(0)).unwrap();
    let res = matched_loss_sweep(&ds, &SweepConfig::default(), 0).unwrap();
    let tr = &res.run(0.014).unwrap().trajectory;
    for w in [2, 3] {
        let ph = tr.phases(w).unwrap();
        assert!(forbidden_transitions(&ph).is_empty(), "w = {w}: {:?}", forbidden_transitions(&ph));
    }
    let (a, b) = (tr.phases(2).unwrap(), tr.phases(4).unwrap());
    let moved = relabelled(&a, &b, tr.records.len(), 4);
    assert!(moved.is_empty(), "labels differ away from boundaries at {moved:?}");
}
