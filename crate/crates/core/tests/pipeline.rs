mod common;

use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use air_core::backend::mock::MockTextToImage;
use air_core::backend::{Backends, TextToImage};
use air_core::manifest::load_dataset;
use air_core::model::{FilterVerdict, PromptRecord, PromptSource, Stage};
use air_core::pipeline::jobs::{JobKind, JobManager, JobStatus};
use air_core::pipeline::{
    run_air_aug, run_air_gen, PipelineConfig, PipelineStage, ProgressUpdate, RunContext, PENDING_DIR,
};
use air_core::Error;
use common::{dir_digest, wildfire_grammar};

fn config(ipp: u32) -> PipelineConfig {
    PipelineConfig {
        images_per_prompt: ipp,
        image_size: 256,
        seed: 42,
        ..PipelineConfig::default()
    }
}

fn backends() -> Backends {
    Backends::mock_with_sigma(0.3)
}

#[test]
fn wildfire_grammar_counts_without_filter() {
    let out = tempfile::tempdir().unwrap();
    let cfg = PipelineConfig {
        use_filter: false,
        ..config(8)
    };
    let b = backends();
    let result = run_air_gen(&wildfire_grammar(), &cfg, RunContext::new(&b), out.path()).unwrap();
    let m = &result.manifest;
    assert_eq!(m.prompts.len(), 4);
    assert_eq!(m.images.len(), 32);
    assert!(m.images.iter().all(|i| i.filter_verdict == FilterVerdict::Kept));
    assert!(m.prompts.iter().all(|p| p.source == PromptSource::Engineered));
    assert!(result.filter_report.is_none());
    assert_eq!(load_dataset(out.path()).unwrap(), *m);
    assert!(!out.path().join(PENDING_DIR).exists());
    for img in &m.images {
        assert!(out.path().join("blobs").join(format!("{}.png", img.image_ref)).exists());
    }
}

#[test]
fn filter_runs_and_leaves_no_pending_verdicts() {
    let out = tempfile::tempdir().unwrap();
    let b = backends();
    let result = run_air_gen(&wildfire_grammar(), &config(8), RunContext::new(&b), out.path()).unwrap();
    let report = result.filter_report.unwrap();
    assert!(report.retention_achieved >= 0.9 - 1e-12);
    assert!(result.manifest.images.iter().all(|i| i.filter_verdict != FilterVerdict::Pending));
    assert!(result.manifest.kept_images().count() >= 24);
}

#[test]
fn runs_are_byte_identical_across_repeats_and_parallelism() {
    let b = backends();
    let mut digests = Vec::new();
    for parallelism in [1, 8, 8] {
        let out = tempfile::tempdir().unwrap();
        let cfg = PipelineConfig {
            parallelism,
            ..config(4)
        };
        run_air_gen(&wildfire_grammar(), &cfg, RunContext::new(&b), out.path()).unwrap();
        digests.push(dir_digest(out.path()));
    }
    assert_eq!(digests[0], digests[1]);
    assert_eq!(digests[1], digests[2]);
    assert!(digests[0].contains_key("manifest.json"));
}

#[test]
fn progress_is_monotone_and_staged_in_order() {
    let out = tempfile::tempdir().unwrap();
    let seen: Mutex<Vec<ProgressUpdate>> = Mutex::new(Vec::new());
    let sink = |u: ProgressUpdate| seen.lock().unwrap().push(u);
    let b = backends();
    let ctx = RunContext {
        backends: &b,
        events: &sink,
        cancel: None,
    };
    let cfg = PipelineConfig {
        parallelism: 8,
        ..config(4)
    };
    run_air_gen(&wildfire_grammar(), &cfg, ctx, out.path()).unwrap();
    let events = seen.into_inner().unwrap();
    for w in events.windows(2) {
        assert!(w[1].progress >= w[0].progress, "{w:?}");
        assert!(w[1].stage >= w[0].stage, "{w:?}");
    }
    assert_eq!(events.last().unwrap().progress, 1.0);
    let stages: Vec<PipelineStage> = events.iter().map(|e| e.stage).collect();
    for s in PipelineStage::ALL {
        assert!(stages.contains(&s), "missing {s:?}");
    }
}

#[test]
fn simplistic_prompts_without_rewriter() {
    let out = tempfile::tempdir().unwrap();
    let cfg = PipelineConfig {
        use_rewriter: false,
        use_filter: false,
        ..config(1)
    };
    let b = backends();
    let m = run_air_gen(&wildfire_grammar(), &cfg, RunContext::new(&b), out.path()).unwrap().manifest;
    assert!(m.prompts.iter().all(|p| p.source == PromptSource::Simplistic));
    assert!(m.prompts.iter().any(|p| p.text() == "small fire and smoke, tropical forest, drone's view, morning"));
}

#[test]
fn aug_replicates_one_to_one_with_style() {
    let b = backends();
    let src = tempfile::tempdir().unwrap();
    let gen_cfg = PipelineConfig {
        use_filter: false,
        ..config(25)
    };
    let source = run_air_gen(&wildfire_grammar(), &gen_cfg, RunContext::new(&b), src.path()).unwrap().manifest;
    assert_eq!(source.images.len(), 100);

    let out = tempfile::tempdir().unwrap();
    let aug_cfg = PipelineConfig {
        use_filter: false,
        use_style_transfer: true,
        style_domain: Some("warm".into()),
        ..config(1)
    };
    let aug = run_air_aug(&source, src.path(), &aug_cfg, RunContext::new(&b), out.path()).unwrap().manifest;
    assert_eq!(aug.prompts.len(), 100);
    assert_eq!(aug.images.len(), 100);
    assert_eq!(aug.classes, source.classes);
    assert!(aug.prompts.iter().all(|p| p.source == PromptSource::Extracted && p.combination.is_none()));
    assert!(aug.images.iter().all(|i| i.stage_history == [Stage::Generated, Stage::StyleTransferred]));
    assert_eq!(aug.pipeline_config.source_dataset.as_deref(), Some(source.dataset_id.as_str()));
    for (a, s) in aug.prompts.iter().zip(source.kept_images()) {
        assert_eq!(a.class_label, s.class_label);
    }
}

/// Delegates to the mock but fails once `budget` calls are used up.
struct Crashing {
    budget: AtomicUsize,
}

impl TextToImage for Crashing {
    fn generate(&self, prompt: &PromptRecord, seed: u64, size: u32) -> air_core::Result<Vec<u8>> {
        if self.budget.fetch_update(Ordering::SeqCst, Ordering::SeqCst, |b| b.checked_sub(1)).is_err() {
            return Err(Error::Backend {
                endpoint: "crash".into(),
                status: None,
                message: "simulated crash".into(),
            });
        }
        MockTextToImage.generate(prompt, seed, size)
    }

    fn identifier(&self) -> String {
        MockTextToImage.identifier()
    }
}

#[test]
fn resume_after_crash_matches_uninterrupted_run() {
    let cfg = PipelineConfig {
        parallelism: 1,
        ..config(4)
    };
    let reference = tempfile::tempdir().unwrap();
    let b = backends();
    run_air_gen(&wildfire_grammar(), &cfg, RunContext::new(&b), reference.path()).unwrap();

    let out = tempfile::tempdir().unwrap();
    let mut crashing = backends();
    crashing.text_to_image = Arc::new(Crashing {
        budget: AtomicUsize::new(7),
    });
    let err = run_air_gen(&wildfire_grammar(), &cfg, RunContext::new(&crashing), out.path()).unwrap_err();
    assert!(matches!(err, Error::Backend { .. }));
    assert!(out.path().join(PENDING_DIR).join("journal.jsonl").exists());

    // The resumed run must only generate the 9 missing images.
    let mut limited = backends();
    limited.text_to_image = Arc::new(Crashing {
        budget: AtomicUsize::new(9),
    });
    run_air_gen(&wildfire_grammar(), &cfg, RunContext::new(&limited), out.path()).unwrap();
    assert_eq!(dir_digest(out.path()), dir_digest(reference.path()));
}

#[test]
fn cancellation_stops_the_run() {
    let out = tempfile::tempdir().unwrap();
    let cancel = AtomicBool::new(true);
    let b = backends();
    let ctx = RunContext {
        backends: &b,
        events: &air_core::pipeline::NullEvents,
        cancel: Some(&cancel),
    };
    assert!(matches!(run_air_gen(&wildfire_grammar(), &config(2), ctx, out.path()), Err(Error::Cancelled)));
}

#[test]
fn parallelism_is_bounded_by_backends() {
    let out = tempfile::tempdir().unwrap();
    let mut b = backends();
    b.max_parallel = 2;
    let cfg = PipelineConfig {
        parallelism: 3,
        ..config(1)
    };
    match run_air_gen(&wildfire_grammar(), &cfg, RunContext::new(&b), out.path()) {
        Err(Error::Validation { field, .. }) => assert_eq!(field, "parallelism"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn job_manager_runs_air_gen_with_monotone_progress() {
    let jm = JobManager::new(2, None);
    let out = tempfile::tempdir().unwrap();
    let dir = out.path().to_path_buf();
    let id = jm
        .submit(
            JobKind::AirGen,
            Box::new(move |job| {
                let b = backends();
                let ctx = RunContext {
                    backends: &b,
                    events: job,
                    cancel: Some(job.cancel_flag()),
                };
                let out = run_air_gen(&wildfire_grammar(), &config(4), ctx, &dir)?;
                Ok(serde_json::json!({ "dataset_id": out.manifest.dataset_id }))
            }),
        )
        .unwrap();
    let state = jm.wait(&id, Duration::from_secs(60)).unwrap();
    assert_eq!(state.status, JobStatus::Succeeded, "{:?}", state.error);
    let (events, done) = jm.events(&id, 0).unwrap();
    assert!(done);
    for w in events.windows(2) {
        assert!(w[1].progress >= w[0].progress);
    }
    assert_eq!(events.last().unwrap().progress, 1.0);
    assert_eq!(events.last().unwrap().status, Some(JobStatus::Succeeded));
}
