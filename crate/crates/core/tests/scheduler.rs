use faastrain::optimizer::{DeploymentConfig, SearchSpace, UserGoal};
use faastrain::scheduler::{
    run_job, EventKind, FaultInjection, JobSpec, RunStatus, SchedulerError,
};

fn fixed_job() -> JobSpec {
    JobSpec::example()
}

#[test]
fn fixed_deployment_completes_and_reconciles() {
    let job = fixed_job();
    let l = run_job(&job).unwrap();
    assert_eq!(l.status, RunStatus::Completed);
    assert_eq!(l.rows.len() as u64, job.total_iterations());
    let billed: f64 = l.rows.iter().map(|r| r.cost).sum();
    assert!(l.total_cost >= billed * 0.5);
    assert!((l.total_cost - (l.platform_cost + l.standing_cost)).abs() < 1e-15);
    assert!(l.final_loss.unwrap().is_finite());
    println!("{:?}", l.summary());
}

#[test]
fn training_reduces_loss() {
    let mut job = fixed_job();
    job.epochs = 5;
    let l = run_job(&job).unwrap();
    let first = l.rows[0].loss;
    let last = l.rows.last().unwrap().loss;
    assert!(last < first * 0.5, "{first} -> {last}");
}

#[test]
fn injected_faults_do_not_change_the_result() {
    let mut job = fixed_job();
    let clean = run_job(&job).unwrap();
    job.faults = (0..10)
        .map(|i| FaultInjection {
            worker: i % 2,
            iteration: 3 * i as u64 + 1,
        })
        .collect();
    let faulty = run_job(&job).unwrap();
    assert_eq!(faulty.restarts(), 10);
    assert_eq!(faulty.events_of(EventKind::Failure).count(), 10);
    let diff = clean
        .final_parameters
        .iter()
        .zip(&faulty.final_parameters)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    assert!(diff <= 1e-12, "{diff}");
    assert!(faulty.wall_time > clean.wall_time);
}

#[test]
fn repeated_faults_are_a_restart_storm() {
    let mut job = fixed_job();
    job.max_consecutive_failures = 2;
    job.platform.failure_rate = 1.0;
    assert!(matches!(
        run_job(&job),
        Err(SchedulerError::RestartStorm { .. })
    ));
}

#[test]
fn duration_limit_forces_checkpoint_exits() {
    let mut job = fixed_job();
    job.epochs = 3;
    job.workload.seconds_per_sample_param = 2e-3;
    job.platform.max_duration = 30.0;
    let reference = {
        let mut j = job.clone();
        j.platform.max_duration = 1e9;
        run_job(&j).unwrap()
    };
    let l = run_job(&job).unwrap();
    assert!(l.events_of(EventKind::CheckpointExit).count() > 0);
    assert_eq!(l.events_of(EventKind::DurationKill).count(), 0);
    assert_eq!(l.final_parameters, reference.final_parameters);
}

#[test]
fn search_picks_a_deployment() {
    let mut job = fixed_job();
    job.deployment = None;
    job.optimizer.space = SearchSpace {
        min_workers: 1,
        max_workers: 8,
        min_memory: 512,
        max_memory: 4096,
        memory_step: 512,
    };
    job.goal = UserGoal::fastest();
    let l = run_job(&job).unwrap();
    assert!(l.probes > 0);
    assert!(l.profiling_time > 0.0);
    assert_eq!(l.events_of(EventKind::Search).count(), 1);
    println!("{:?}", l.summary());
    let _ = DeploymentConfig::new(1, 512);
}
