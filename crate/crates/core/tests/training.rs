use consolidate::importance::{estimate, Method};
use consolidate::metrics::{a_avg, a_last, accuracy};
use consolidate::params::{ParamSet, HEAD_PREFIX};
use consolidate::regularizer::{reg_loss, Anchor};
use consolidate::scenario::{make_synthetic, reference_stream, TaskStream};
use consolidate::trainer::{run_stream, run_stream_state, AnchorPolicy, ContinualState, PenaltyStep};
use consolidate::{Error, Execution, ImportanceMap, TrainConfig};

fn quick(method: Option<Method>, lambda: f64, seed: u64) -> TrainConfig {
    TrainConfig {
        epochs: 6,
        lr_milestones: vec![],
        hidden: vec![16],
        method,
        lambda,
        seed,
        ..TrainConfig::default()
    }
}

fn small_stream(seed: u64) -> TaskStream {
    let data = make_synthetic(6, 5, 30, 3.0, seed).unwrap();
    consolidate::scenario::split_equally(&data, 3, seed).unwrap()
}

fn bits(p: &ParamSet) -> Vec<u64> {
    p.iter_entries().map(|(_, _, v)| v.to_bits()).collect()
}

#[test]
fn zero_lambda_matches_fine_tuning_bit_for_bit() {
    let stream = small_stream(4);
    let (ft_net, ft_m) = run_stream(&stream, &quick(None, 0.0, 4)).unwrap();
    for method in Method::ALL {
        for step in [PenaltyStep::Proximal, PenaltyStep::Explicit] {
            let cfg = TrainConfig {
                penalty_step: step,
                ..quick(Some(method), 0.0, 4)
            };
            let (net, m) = run_stream(&stream, &cfg).unwrap();
            assert_eq!(bits(net.params()), bits(ft_net.params()), "{method} {step:?}");
            assert_eq!(m, ft_m);
        }
    }
}

#[test]
fn runs_are_deterministic_and_execution_independent() {
    let stream = small_stream(9);
    for method in [Some(Method::EwcDr), Some(Method::Si), Some(Method::OnlineEwc), None] {
        let cfg = quick(method, 5.0, 9);
        let (a, ma) = run_stream(&stream, &cfg).unwrap();
        let (b, mb) = run_stream(&stream, &cfg).unwrap();
        let seq = TrainConfig {
            execution: Execution::Sequential,
            ..cfg.clone()
        };
        let (c, mc) = run_stream(&stream, &seq).unwrap();
        assert_eq!(bits(a.params()), bits(b.params()));
        assert_eq!(bits(a.params()), bits(c.params()));
        assert_eq!(ma, mb);
        assert_eq!(ma, mc);
    }
}

#[test]
fn training_never_reads_earlier_or_later_tasks() {
    let stream = small_stream(2);
    let cfg = quick(Some(Method::Ewc), 10.0, 2);
    let mut st = ContinualState::new(5, stream.len(), &cfg).unwrap();
    for t in 0..stream.len() {
        let before = stream.train_read_counts();
        st.train_task(&stream, t, &cfg).unwrap();
        st.evaluate(&stream, t, cfg.execution).unwrap();
        st.consolidate(&stream, t, &cfg).unwrap();
        let after = stream.train_read_counts();
        for j in 0..stream.len() {
            if j == t {
                assert!(after[j] > before[j]);
            } else {
                assert_eq!(after[j], before[j], "task {} touched while on task {}", j + 1, t + 1);
            }
        }
    }
}

#[test]
fn out_of_order_task_is_a_protocol_error() {
    let stream = small_stream(2);
    let cfg = quick(None, 0.0, 2);
    let mut st = ContinualState::new(5, stream.len(), &cfg).unwrap();
    assert!(matches!(st.train_task(&stream, 1, &cfg), Err(Error::Protocol(_))));
    st.train_task(&stream, 0, &cfg).unwrap();
    assert!(matches!(st.train_task(&stream, 0, &cfg), Err(Error::Protocol(_))));
}

#[test]
fn consolidate_is_read_only_and_anchors_at_current_parameters() {
    let stream = small_stream(5);
    for method in Method::ALL {
        let cfg = quick(Some(method), 3.0, 5);
        let mut st = ContinualState::new(5, stream.len(), &cfg).unwrap();
        st.train_task(&stream, 0, &cfg).unwrap();
        let snapshot = bits(st.net.params());
        st.consolidate(&stream, 0, &cfg).unwrap();
        assert_eq!(bits(st.net.params()), snapshot, "{method}");
        let anchor = st.anchor().expect("regularizing method anchors");
        assert_eq!(reg_loss(anchor, st.net.params()).unwrap(), 0.0);
        assert_eq!(bits(anchor.theta_ref()), snapshot);
    }
}

#[test]
fn anchor_policy_all_keeps_one_anchor_per_task() {
    let stream = small_stream(5);
    let cfg = TrainConfig {
        anchor_policy: AnchorPolicy::All,
        ..quick(Some(Method::Mas), 1.0, 5)
    };
    let st = run_stream_state(&stream, &cfg).unwrap();
    assert_eq!(st.anchors.len(), 3);
    let st = run_stream_state(&stream, &quick(Some(Method::Mas), 1.0, 5)).unwrap();
    assert_eq!(st.anchors.len(), 1);
}

#[test]
fn huge_lambda_pins_anchored_parameters() {
    let stream = small_stream(8);
    let cfg = quick(Some(Method::Ewc), 1e9, 8);
    let mut st = ContinualState::new(5, stream.len(), &cfg).unwrap();
    st.train_task(&stream, 0, &cfg).unwrap();
    // Replace the estimated importance by Ω ≡ 1 so every entry is anchored.
    let theta_ref = st.net.params().clone();
    let mut ones = theta_ref.zeros_like();
    ones.map_inplace(|v| *v = 1.0);
    st.anchors = vec![Anchor::new(theta_ref.clone(), ImportanceMap::new(Method::Ewc, 1, ones).unwrap(), 1e9).unwrap()];
    st.train_task(&stream, 1, &cfg).unwrap();

    let mut worst: f64 = 0.0;
    for block in theta_ref.blocks() {
        let now = st.net.params().get(&block.name).unwrap().value.as_slice();
        let old = block.value.as_slice();
        // Head rows of task 2 follow the anchored prefix and are free.
        for (a, b) in old.iter().zip(&now[..old.len()]) {
            worst = worst.max((a - b).abs());
        }
    }
    assert!(worst < 1e-3, "max deviation {worst}");
    let head = st.net.params().get(&format!("{HEAD_PREFIX}weight")).unwrap().value.as_slice();
    let old_len = theta_ref.get(&format!("{HEAD_PREFIX}weight")).unwrap().value.as_slice().len();
    assert!(head[old_len..].iter().any(|v| v.abs() > 1e-2), "new head rows should still learn");
}

#[test]
fn single_task_fits_well_separated_blobs() {
    let data = make_synthetic(10, 8, 60, 8.0, 3).unwrap();
    let (train, test) = consolidate::scenario::train_test_split(&data, 3).unwrap();
    let stream = TaskStream::from_groups(&train, &test, &[(0..10).collect()]).unwrap();
    let cfg = TrainConfig {
        epochs: 15,
        seed: 3,
        method: None,
        ..TrainConfig::default()
    };
    let (net, m) = run_stream(&stream, &cfg).unwrap();
    let seen: Vec<usize> = (0..10).collect();
    let train_acc = accuracy(&net, stream.train_split(0).unwrap(), &seen).unwrap();
    assert!(train_acc > 95.0, "training accuracy {train_acc}");
    assert_eq!(a_last(&m).unwrap(), a_avg(&m).unwrap());
}

#[test]
fn fine_tuning_forgets_old_tasks() {
    let stream = reference_stream(1).unwrap();
    let (_, m) = run_stream(&stream, &TrainConfig {
        method: None,
        lambda: 0.0,
        ..TrainConfig::default()
    })
    .unwrap();
    assert!(m.get(1, 1).unwrap() > 90.0);
    for j in 1..5 {
        assert!(m.get(5, j).unwrap() < 10.0, "task {j}: {}", m.get(5, j).unwrap());
    }
}

#[test]
fn ewc_dr_head_mass_exceeds_ewc_on_confident_task() {
    let data = make_synthetic(4, 8, 60, 8.0, 11).unwrap();
    let (train, test) = consolidate::scenario::train_test_split(&data, 11).unwrap();
    let stream = TaskStream::from_groups(&train, &test, &[(0..4).collect()]).unwrap();
    let cfg = TrainConfig {
        seed: 11,
        method: None,
        ..TrainConfig::default()
    };
    let (net, _) = run_stream(&stream, &cfg).unwrap();
    let samples = stream.train_split(0).unwrap().samples();
    let head_mass = |m| {
        let om = estimate(m, &net, samples, Execution::Parallel).unwrap();
        om.values()
            .iter_entries()
            .filter(|(b, _, _)| b.is_head())
            .map(|(_, _, v)| v)
            .sum::<f64>()
    };
    let (ewc, dr) = (head_mass(Method::Ewc), head_mass(Method::EwcDr));
    assert!(dr >= 10.0 * ewc, "EWC {ewc}, EWC-DR {dr}");
}

#[test]
fn si_and_online_ewc_produce_valid_importance() {
    let stream = small_stream(6);
    for method in [Method::Si, Method::OnlineEwc] {
        let st = run_stream_state(&stream, &quick(Some(method), 1.0, 6)).unwrap();
        let om = st.anchor().unwrap().omega();
        assert_eq!(om.method, method);
        assert!(om.values().iter_entries().all(|(_, _, v)| v.is_finite() && v >= 0.0));
        assert!(om.total() > 0.0);
    }
}
