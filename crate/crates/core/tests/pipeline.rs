use molem::autoencoder::RoutingDecision;
use molem::config::RunConfig;
use molem::pipeline::{prepare_run, run_pipeline, PipelineOptions, RunManifest, RunState};

/// Small enough to run in seconds; accuracy is not the point here.
fn tiny() -> RunConfig {
    RunConfig {
        d_model: 16,
        n_layers: 2,
        n_heads: 2,
        d_ff: 32,
        max_len: 128,
        n_experts: 3,
        n_select: 2,
        lora_rank: 2,
        lora_alpha: 4.0,
        latent_len: 2,
        max_extra_injections: 2,
        d_key: 8,
        stage_epochs: 1,
        stage_batch_size: 8,
        ae_hidden: 8,
        ae_bottleneck: 4,
        ae_epochs: 5,
        train_size: 24,
        val_size: 20,
        test_size: 12,
        pretrain_per_domain: 60,
        pretrain_filler: 10,
        pretrain_heldout: 20,
        pretrain_epochs: 1,
        max_heldout_loss: 1e9,
        baseline_epochs: 1,
        max_new_tokens: 24,
        ..RunConfig::desk()
    }
}

#[test]
fn earlier_stages_and_ood_prompts_are_untouched_by_later_stages() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_pipeline(&tiny(), dir.path(), &PipelineOptions::default()).unwrap();
    assert_eq!(out.evals.len(), 4);
    let mut compared = 0;
    for t in 1..out.evals.len() {
        for (set, row) in out.evals[t].sets.iter().enumerate() {
            for (i, d) in row.decisions.iter().enumerate() {
                let out_now = &row.outputs[i];
                match d {
                    RoutingDecision::Ood => {
                        assert_eq!(out_now, &out.evals[0].sets[set].outputs[i]);
                        compared += 1;
                    }
                    RoutingDecision::Stage(s) => {
                        // every later row that routes the prompt to the same stage reproduces it
                        for later in &out.evals[t + 1..] {
                            if later.sets[set].decisions[i] == *d {
                                assert_eq!(out_now, &later.sets[set].outputs[i], "stage {s}");
                                compared += 1;
                            }
                        }
                    }
                }
            }
            let pct: f64 = row.routing_percentages().iter().sum();
            assert!((pct - 100.0).abs() < 1e-9);
        }
    }
    assert!(compared > 0);
    out.manifest.verify(dir.path()).unwrap();
    let text = std::fs::read_to_string(dir.path().join("manifest.json")).unwrap();
    assert_eq!(RunManifest::from_json(&text).unwrap(), out.manifest);
    assert_eq!(out.manifest.status, "complete");
}

#[test]
fn stepwise_runs_match_the_one_shot_pipeline() {
    let cfg = tiny();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    run_pipeline(&cfg, a.path(), &PipelineOptions::default()).unwrap();
    prepare_run(&cfg, b.path()).unwrap();
    for _ in 0..cfg.task_order.len() {
        let mut state = RunState::load(b.path()).unwrap();
        state.add_stage(b.path()).unwrap();
    }
    let mut state = RunState::load(b.path()).unwrap();
    assert!(state.add_stage(b.path()).is_err());
    for f in ["checkpoints/reasoner.ckpt", "checkpoints/stage1.ckpt", "checkpoints/stage3.ckpt", "registry.json"] {
        let x = std::fs::read(a.path().join(f)).unwrap();
        let y = std::fs::read(b.path().join(f)).unwrap();
        assert!(x == y, "{f} differs");
    }
}

#[test]
fn failed_runs_leave_a_failed_manifest() {
    let mut cfg = tiny();
    cfg.max_heldout_loss = 1e-9;
    let dir = tempfile::tempdir().unwrap();
    let err = run_pipeline(&cfg, dir.path(), &PipelineOptions::default()).unwrap_err();
    assert!(matches!(err, molem::Error::TrainingFailure { .. }), "{err}");
    let text = std::fs::read_to_string(dir.path().join("manifest.json")).unwrap();
    assert!(RunManifest::from_json(&text).unwrap().status.starts_with("failed"));
}
