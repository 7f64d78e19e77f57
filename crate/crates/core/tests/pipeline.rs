use std::sync::{Arc, Mutex};

use rollout_eval::annotation::server::router;
use rollout_eval::annotation::{
    export_packets, study_report, RaterRole, RatingStore, RatingValue, Study, StudyGrouping,
    SubmitRating,
};
use rollout_eval::bridge::{collect_predictions, BridgeClient, MockOracle, MockOracleConfig, MockServer};
use rollout_eval::describe::Describer;
use rollout_eval::ingest::{discover_manifests, filter_rollouts, ingest_manifests, IngestConfig};
use rollout_eval::metrics::{aggregate, score, Grouping, NgramMode};
use rollout_eval::qa::{AnswerSpaces, QaBuilder, QaMode};
use rollout_eval::synthetic::{write_corpus, SyntheticConfig};

#[test]
fn disk_corpus_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SyntheticConfig {
        sessions: 24,
        rollout_fraction: 0.5,
        flagged_fraction: 0.5,
        seed: 4,
        ..SyntheticConfig::default()
    };
    let corpus = write_corpus(dir.path(), &cfg).unwrap();
    let found = discover_manifests(dir.path()).unwrap();
    assert_eq!(found, corpus.manifests);

    let out = ingest_manifests(&found, 14, &IngestConfig::default()).unwrap();
    assert!(out.rejected.is_empty());
    let flagged = corpus.truth.values().filter(|t| t.flagged).count();
    assert!(flagged > 0);
    assert_eq!(out.dropped.total, flagged);
    assert_eq!(out.clips.len(), corpus.truth.len() - flagged);
    let (kept, again) = filter_rollouts(out.clips);
    assert_eq!(again.total, 0);

    let (descs, skipped) = Describer::default().describe_all(&kept).unwrap();
    assert!(skipped.is_empty());
    for d in &descs {
        assert_eq!(d.action_label, corpus.truth[&d.clip_id].action);
    }
}

#[test]
fn mock_server_scores_perfectly() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = write_corpus(dir.path(), &SyntheticConfig { sessions: 10, ..Default::default() }).unwrap();
    let out = ingest_manifests(&corpus.manifests, 14, &IngestConfig::default()).unwrap();
    let (descs, _) = Describer::default().describe_all(&out.clips).unwrap();
    let items = QaBuilder::default()
        .build_dataset(&descs, &AnswerSpaces::default(), QaMode::Sampled6, 0)
        .unwrap();
    let oracle = MockOracle::new(items.clone(), MockOracleConfig { epsilon: 0.0, seed: 0 }).unwrap();
    let server = MockServer::spawn("127.0.0.1:0", oracle).unwrap();
    let client = BridgeClient::new(&server.endpoint());
    let preds = collect_predictions(&client, &items, |_| Some(vec!["f.png".into()]), 3, 0).unwrap();
    server.shutdown();
    let scores = score(&preds, &items, NgramMode::Set).unwrap();
    let report = aggregate(&[scores], &[Grouping::TaskFormat]);
    assert_eq!(report.len(), 6);
    assert!(report.iter().all(|r| r.em_mean == 1.0 && r.rouge_mean == 1.0));
}

fn packets(n: usize) -> Vec<rollout_eval::annotation::AnnotationPacket> {
    let (clips, _) = rollout_eval::synthetic::clips(n, &SyntheticConfig::default());
    let (descs, _) = Describer::default().describe_all(&clips).unwrap();
    let items = QaBuilder::default()
        .build_dataset(&descs, &AnswerSpaces::default(), QaMode::Sampled6, 0)
        .unwrap();
    let items: Vec<_> = items.into_iter().take(20).collect();
    let oracle = MockOracle::new(items.clone(), MockOracleConfig { epsilon: 0.0, seed: 0 }).unwrap();
    let preds: Vec<_> = items
        .iter()
        .map(|i| rollout_eval::bridge::Prediction {
            item_id: i.item_id.clone(),
            texts: vec![],
            answer: oracle.mock_answer(i),
            model_tag: "m".into(),
            latency_ms: 0,
        })
        .collect();
    export_packets(&items, &preds, &clips, &Default::default()).unwrap()
}

/// Twenty packets rated through the workflow, two of them forced into
/// disagreement, with a restart of the store halfway through.
#[test]
fn study_survives_restart_and_matches_import() {
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("ratings.jsonl");
    let packets = packets(4);
    assert_eq!(packets.len(), 20);

    let mut ts = 0u64;
    let mut submit = |study: &mut Study, p: &str, who: &str, value, role| {
        ts += 1;
        study
            .submit(SubmitRating {
                packet_id: p.into(),
                annotator_id: who.into(),
                value,
                comment: None,
                role,
                timestamp: Some(ts),
                supersede: false,
            })
            .unwrap();
    };

    let mut study = Study::new(packets.clone(), RatingStore::open(&log).unwrap());
    for p in &packets[..10] {
        submit(&mut study, &p.packet_id, "ann_a", RatingValue::Correct, RaterRole::Primary);
    }
    drop(study);

    let mut study = Study::new(packets.clone(), RatingStore::open(&log).unwrap());
    assert_eq!(study.store().len(), 10);
    assert_eq!(study.next_packet("ann_a").unwrap().packet_id, packets[10].packet_id);
    for p in &packets[10..] {
        submit(&mut study, &p.packet_id, "ann_a", RatingValue::Correct, RaterRole::Primary);
    }
    for (i, p) in packets.iter().enumerate() {
        let v = if i < 2 { RatingValue::Incorrect } else { RatingValue::Correct };
        submit(&mut study, &p.packet_id, "ann_b", v, RaterRole::Primary);
    }
    assert_eq!(study.adjudication_queue().len(), 2);
    for p in &packets[..2] {
        submit(&mut study, &p.packet_id, "ann_c", RatingValue::Partial, RaterRole::Adjudicator);
    }
    let live = study.report(StudyGrouping::Overall).unwrap();
    assert_eq!(live[0].n_adjudicated, 2);
    assert_eq!(live[0].graded, Some(19.0 / 20.0));

    let ratings = rollout_eval::annotation::store::read_ratings(&log).unwrap();
    let imported = study_report(&packets, &ratings, StudyGrouping::Overall, 0.2, 0.95).unwrap();
    assert_eq!(live, imported);

    // the HTTP surface reports the same thing
    let app = router(Arc::new(Mutex::new(study)));
    let rt = tokio::runtime::Builder::new_current_thread().enable_all().build().unwrap();
    let body = rt.block_on(async {
        use http_body_util::BodyExt;
        use tower::ServiceExt;
        let resp = app
            .oneshot(axum::http::Request::get("/report?group=overall").body(axum::body::Body::empty()).unwrap())
            .await
            .unwrap();
        resp.into_body().collect().await.unwrap().to_bytes()
    });
    let served: Vec<rollout_eval::annotation::StudyReport> = serde_json::from_slice(&body).unwrap();
    assert_eq!(served, live);
}
