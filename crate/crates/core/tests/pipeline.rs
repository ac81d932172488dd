use std::io::Read;
use std::sync::Arc;
use std::time::Duration;

use airlock_core::archive::BundleArchive;
use airlock_core::attestation::SignatureRejection;
use airlock_core::deploy::DeploymentConfig;
use airlock_core::executor::runner::ProcessRunner;
use airlock_core::gateway::{CaseFilter, CaseKind, CaseView, DecisionRequest, GatewayError};
use airlock_core::testkit::{sh_job, Harness};
use airlock_core::{JobState, SystemClock};

const WAIT: Duration = Duration::from_secs(30);

fn harness(dir: &std::path::Path, threshold: usize, vetters: usize) -> Harness {
    let mut config = DeploymentConfig::default();
    config.gateway.approval_threshold = threshold;
    config.executor.approval_threshold = threshold;
    config.executor.credential_timeout = Duration::from_secs(10);
    let mut h = Harness::new(dir, Arc::new(SystemClock), config, Arc::new(ProcessRunner::default()), vetters).unwrap();
    h.load_dataset("cohort", b"alpha\nbeta\ngamma\n");
    h.start();
    h
}

#[test]
fn approved_job_runs_and_released_results_are_fetched() {
    let dir = tempfile::tempdir().unwrap();
    let h = harness(dir.path(), 2, 2);
    let script = "wc -l < \"$AIRLOCK_DATA_DIR/cohort\" > \"$AIRLOCK_OUTPUT_DIR/count.txt\"\necho finished\n";
    let receipt = h.submit(sh_job(script, "cohort", 20)).unwrap();
    assert_eq!(receipt.state, JobState::PendingInputVetting);

    let first = h.vetters[0].sign(&h, &receipt.job_id, receipt.code_hash).unwrap();
    let partial = h
        .deployment
        .public
        .decide_input(&h.vetters[0].principal, &receipt.job_id, DecisionRequest { approve: true, reason: None, signature: Some(first) })
        .unwrap();
    assert_eq!(partial.state, JobState::PendingInputVetting);
    let second = h.vetters[1].sign(&h, &receipt.job_id, receipt.code_hash).unwrap();
    let done = h
        .deployment
        .public
        .decide_input(&h.vetters[1].principal, &receipt.job_id, DecisionRequest { approve: true, reason: None, signature: Some(second) })
        .unwrap();
    assert_eq!(done.state, JobState::QueuedForExecution);

    let job = h.wait_for(&receipt.job_id, &[JobState::PendingOutputVetting], WAIT).unwrap_or_else(|j| panic!("{j:?}"));
    let states: Vec<_> = job.history.iter().map(|c| c.state).collect();
    assert_eq!(
        states,
        vec![
            JobState::Submitted,
            JobState::PendingInputVetting,
            JobState::ApprovedSigned,
            JobState::QueuedForExecution,
            JobState::Executing,
            JobState::Completed,
            JobState::PendingOutputVetting
        ]
    );
    assert!(matches!(h.fetch(&receipt.job_id), Err(GatewayError::NotReleased(JobState::PendingOutputVetting))));

    let cases = h.deployment.public.list_cases(&h.vetters[0].principal, CaseKind::Output, CaseFilter::Open).unwrap();
    let CaseView::Output { artifacts, log, .. } = &cases[0] else { panic!() };
    assert_eq!(artifacts[0].content.trim(), "3");
    assert!(log.content.contains("finished"));

    h.decide_output(&receipt.job_id, true).unwrap();
    let download = h.fetch(&receipt.job_id).unwrap();
    assert_eq!(download.state, JobState::Retrieved);
    let archive = BundleArchive::parse(&download.archive).unwrap();
    assert_eq!(archive.get("count.txt").unwrap(), b"3\n");
    let again = h.fetch(&receipt.job_id).unwrap();
    assert_eq!(again.archive, download.archive);
    assert_eq!(h.status(&receipt.job_id).state, JobState::Retrieved);

    for log in [h.deployment.public.audit(), h.deployment.secure.audit(), h.deployment.vault().audit()] {
        assert!(log.verify().unwrap().is_ok());
    }
    assert_eq!(std::fs::read_dir(h.deployment.secure.airlock_root()).unwrap().count(), 0);
}

#[test]
fn rejections_and_failures_reach_the_consumer() {
    let dir = tempfile::tempdir().unwrap();
    let h = harness(dir.path(), 1, 1);

    let rejected = h.submit(sh_job("true\n", "cohort", 5)).unwrap();
    let req = DecisionRequest { approve: false, reason: Some("uses a network library".into()), signature: None };
    h.deployment.public.decide_input(&h.vetters[0].principal, &rejected.job_id, req.clone()).unwrap();
    let job = h.status(&rejected.job_id);
    assert_eq!(job.state, JobState::RejectedInput);
    assert_eq!(job.detail.as_deref(), Some("uses a network library"));
    assert_eq!(
        h.deployment.public.decide_input(&h.vetters[0].principal, &rejected.job_id, req),
        Err(GatewayError::CaseClosed)
    );

    let failing = h.submit(sh_job("echo oops >&2\nexit 3\n", "cohort", 5)).unwrap();
    h.approve_input(&failing, 1).unwrap();
    let job = h.wait_for(&failing.job_id, &[JobState::PendingOutputVetting], WAIT).unwrap();
    assert!(job.history.iter().any(|c| c.state == JobState::ExecutionFailed));
    h.decide_output(&failing.job_id, false).unwrap();
    assert_eq!(h.status(&failing.job_id).state, JobState::RejectedOutput);
    assert!(matches!(h.fetch(&failing.job_id), Err(GatewayError::NotReleased(JobState::RejectedOutput))));

    let missing = h.submit(sh_job("true\n", "no-such-dataset", 5)).unwrap();
    h.approve_input(&missing, 1).unwrap();
    let job = h.wait_for(&missing.job_id, &[JobState::PendingOutputVetting], WAIT).unwrap();
    let failed = job.history.iter().find(|c| c.state == JobState::ExecutionFailed).unwrap();
    assert!(failed.detail.as_deref().unwrap().contains("UnknownDataset"), "{failed:?}");
}

#[test]
fn gateway_signature_checks() {
    let dir = tempfile::tempdir().unwrap();
    let h = harness(dir.path(), 1, 2);
    let a = h.submit(sh_job("true\n", "cohort", 5)).unwrap();
    let b = h.submit(sh_job("echo b\n", "cohort", 5)).unwrap();
    let v = &h.vetters[0];
    let sig_for_b = v.sign(&h, &a.job_id, b.code_hash).unwrap();
    let req = DecisionRequest { approve: true, reason: None, signature: Some(sig_for_b) };
    assert_eq!(
        h.deployment.public.decide_input(&v.principal, &a.job_id, req),
        Err(GatewayError::SignatureInvalid(SignatureRejection::HashMismatch))
    );
    assert_eq!(h.status(&a.job_id).state, JobState::PendingInputVetting);

    // A nonce issued to vetter-1 cannot back vetter-0's signature.
    let other = h.deployment.public.request_nonce(&h.vetters[1].principal).unwrap();
    let sig = airlock_core::attestation::sign_offline(&a.job_id, &v.id, a.code_hash, other.value, &v.seed, h.clock.now());
    let req = DecisionRequest { approve: true, reason: None, signature: Some(sig) };
    assert_eq!(
        h.deployment.public.decide_input(&v.principal, &a.job_id, req),
        Err(GatewayError::SignatureInvalid(SignatureRejection::NonceVetterMismatch))
    );
    assert_eq!(h.deployment.public.request_nonce(&h.consumer), Err(GatewayError::Forbidden));
}

#[test]
fn consumers_never_see_other_consumers_jobs() {
    let dir = tempfile::tempdir().unwrap();
    let h = harness(dir.path(), 1, 1);
    let token = h.deployment.add_principal("dave", airlock_core::gateway::auth::Role::Consumer).unwrap();
    let dave = h.deployment.public.authenticate(Some(&format!("Bearer {token}"))).unwrap();
    let mine = h.submit(sh_job("true\n", "cohort", 5)).unwrap();
    assert_eq!(h.deployment.public.status(&dave, &mine.job_id), Err(GatewayError::NotFound));
    assert_eq!(h.deployment.public.fetch_results(&dave, &mine.job_id), Err(GatewayError::NotFound));
    assert_eq!(h.deployment.public.status(&dave, "../../etc/passwd"), Err(GatewayError::NotFound));
    assert_eq!(h.deployment.public.authenticate(Some("Bearer wrong")), Err(GatewayError::Unauthenticated));
    let mut buf = String::new();
    std::fs::File::open(h.deployment.layout.principals()).unwrap().read_to_string(&mut buf).unwrap();
    assert!(!buf.contains(&token));
}
