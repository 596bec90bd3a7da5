use flow_align::rng;
use flow_align::runner::evaluate_points;
use flow_align::worldgen::Task;

fn target_points(task: &Task, condition: usize, n: usize, seed: u64) -> Vec<Vec<f64>> {
    task.conditions[condition].sample_data(n, &mut rng::seeded(seed))
}

#[test]
fn target_samples_match_closed_form_metrics() {
    let task = Task::two_gaussians(0.3, &[1.0, -1.0], 0.5);
    let e = evaluate_points(&task, 0, &target_points(&task, 0, 100_000, 3)).unwrap();
    // Squared Mahalanobis distance of a 2-D Gaussian sample is chi-square with 2 dof.
    let within_three_sigma = 1.0 - (-4.5f64).exp();
    assert!((e.in_mode - within_three_sigma).abs() < 3e-3, "{e:?}");
    assert!((e.coverage[0] - within_three_sigma / 2.0).abs() < 5e-3, "{e:?}");
    assert!((e.coverage[1] - within_three_sigma / 2.0).abs() < 5e-3, "{e:?}");
    // E[exp(-chi2_2 / 2)] = 1/2 for well separated modes.
    assert!((e.mean_realism - 0.5).abs() < 5e-3, "{e:?}");
    // The region reward is antisymmetric about the origin and the target is symmetric.
    assert!((e.mean_reward - 0.5).abs() < 5e-3, "{e:?}");
}

#[test]
fn realism_of_mode_centres_is_one() {
    let task = Task::two_gaussians(0.3, &[1.0], 0.5);
    let e = evaluate_points(&task, 0, &[vec![2.0, 0.0], vec![-2.0, 0.0]]).unwrap();
    assert!((e.mean_realism - 1.0).abs() < 1e-12);
    assert_eq!(e.coverage, vec![0.5, 0.5]);
}

#[test]
fn far_points_are_unrealistic_and_uncovered() {
    let task = Task::two_gaussians(0.3, &[1.0], 0.5);
    let e = evaluate_points(&task, 0, &[vec![0.0, 0.0], vec![6.0, 0.0]]).unwrap();
    assert_eq!(e.in_mode, 0.0);
    assert!(e.mean_realism < 1e-9);
}
