use fluidctl_core::losses::{loss_terms, reward, total_loss, velocity_term, Ablation, LossWeights, StepTrace, WindowTrace};
use fluidctl_core::rigid_body::Dof;
use proptest::prelude::*;

fn component() -> impl Strategy<Value = f64> {
    -20.0..20.0f64
}

fn step() -> impl Strategy<Value = StepTrace> {
    (
        [component(), component()],
        -3.0..3.0f64,
        [component(), component()],
        -2.0..2.0f64,
        [component(), component()],
        -100.0..100.0f64,
    )
        .prop_map(|(e_xy, e_alpha, xdot, alphadot, force, torque)| StepTrace {
            e_xy,
            e_alpha,
            xdot,
            alphadot,
            force,
            torque,
        })
}

fn window(l: usize) -> impl Strategy<Value = WindowTrace> {
    (prop::collection::vec(step(), l), [component(), component()], -100.0..100.0f64).prop_map(
        |(steps, prev_force, prev_torque)| WindowTrace {
            steps,
            prev_force,
            prev_torque,
        },
    )
}

fn weights(l: usize) -> LossWeights {
    LossWeights {
        l,
        ..LossWeights::default_for(Dof::Three)
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn terms_are_nonnegative_and_sum(w in window(4)) {
        let b = weights(4);
        let t = loss_terms(&w, &b).unwrap();
        prop_assert!(t.o >= 0.0 && t.v >= 0.0 && t.e >= 0.0);
        prop_assert!((t.total - (t.o + t.v + t.e)).abs() <= 1e-9 * t.total.max(1.0));
        prop_assert_eq!(reward(&w, &b).unwrap(), -total_loss(&w, &b).unwrap());
    }

    #[test]
    fn velocity_penalty_fades_with_distance(w in window(3), k in 1.0..5.0f64) {
        let b = weights(3);
        let mut far = w.clone();
        for s in &mut far.steps {
            s.e_xy = [s.e_xy[0] * k, s.e_xy[1] * k];
            s.e_alpha *= k;
        }
        prop_assert!(velocity_term(&far, &b).unwrap() <= velocity_term(&w, &b).unwrap() + 1e-12);
    }

    #[test]
    fn doubling_a_weight_doubles_its_term(w in window(2)) {
        let b = weights(2);
        let doubled = LossWeights { beta_xy: 2.0 * b.beta_xy, beta_alpha: 2.0 * b.beta_alpha, ..b };
        let (a, d) = (loss_terms(&w, &b).unwrap(), loss_terms(&w, &doubled).unwrap());
        prop_assert!((d.o - 2.0 * a.o).abs() <= 1e-9 * a.o.max(1.0));
        prop_assert_eq!(d.v, a.v);
    }

    #[test]
    fn ablations_silence_their_terms(w in window(2)) {
        let b = weights(2);
        let ov = loss_terms(&w, &b.ablated(Ablation::Ov)).unwrap();
        prop_assert_eq!(ov.e, 0.0);
        let oe = loss_terms(&w, &b.ablated(Ablation::Oe)).unwrap();
        prop_assert_eq!(oe.v, 0.0);
        let o = loss_terms(&w, &b.ablated(Ablation::O)).unwrap();
        prop_assert_eq!(o.v + o.e, 0.0);
        prop_assert_eq!(o.o, loss_terms(&w, &b).unwrap().o);
    }
}

#[test]
fn resting_at_the_objective_costs_nothing() {
    let w = WindowTrace {
        steps: vec![StepTrace::default(); 16],
        ..Default::default()
    };
    assert_eq!(total_loss(&w, &weights(16)).unwrap(), 0.0);
}
