mod common;

use common::fixture::*;
use std::collections::BTreeMap;
use usvkit::classifier::CallLabel;
use usvkit::datastore::{AnnotationFilter, Store, StoreError};
use usvkit::spectrogram::{SpectroImage, SpectrogramParams, TileParams};
use usvkit::synthgen::{ReviewStatus, Verdict};

fn labels(store: &Store) -> BTreeMap<String, CallLabel> {
    let mut out: BTreeMap<String, CallLabel> = store.annotations(&AnnotationFilter::default()).iter().map(|a| (a.id.clone(), a.label)).collect();
    out.extend(store.synthetics(None).iter().map(|s| (s.id.clone(), s.label)));
    out
}

#[test]
fn fresh_store_is_version_zero_and_reopens_identically() {
    let dir = tempfile::tempdir().unwrap();
    let mut store = Store::open(dir.path()).unwrap();
    assert_eq!(store.version(), 0);
    let rec = noise_recording(&mut store, "rec-a", 1.0, 1);
    let ids = naturals(&mut store, &rec, 30, 0);
    morph_and_decide(&mut store, &ids[..5], 16, 3, Verdict::Accept);
    store.build_split(None, 0.2, 1).unwrap();
    let before = store.snapshot_files().unwrap();
    let anns: Vec<_> = store.annotations(&AnnotationFilter::default()).into_iter().cloned().collect();
    drop(store);

    let again = Store::open(dir.path()).unwrap();
    assert_eq!(again.version(), 1);
    assert_eq!(again.snapshot_files().unwrap(), before);
    let back: Vec<_> = again.annotations(&AnnotationFilter::default()).into_iter().cloned().collect();
    assert_eq!(back, anns);
}

#[test]
fn newer_schema_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    drop(Store::open(dir.path()).unwrap());
    std::fs::write(dir.path().join("schema.json"), r#"{"schema_version": 99}"#).unwrap();
    match Store::open(dir.path()) {
        Err(StoreError::SchemaMismatch { found: 99, .. }) => {}
        other => panic!("expected schema mismatch, got {:?}", other.err()),
    }
}

#[test]
fn second_writer_is_locked_out_until_the_first_closes() {
    let dir = tempfile::tempdir().unwrap();
    let first = Store::open(dir.path()).unwrap();
    assert!(matches!(Store::open(dir.path()), Err(StoreError::Locked(_))));
    let reader = Store::open_read_only(dir.path()).unwrap();
    assert_eq!(reader.version(), 0);
    drop(first);
    Store::open(dir.path()).unwrap();
}

#[test]
fn read_only_store_rejects_mutation() {
    let dir = tempfile::tempdir().unwrap();
    {
        let mut s = Store::open(dir.path()).unwrap();
        let rec = noise_recording(&mut s, "r", 0.5, 2);
        naturals(&mut s, &rec, 2, 0);
    }
    let mut ro = Store::open_read_only(dir.path()).unwrap();
    assert!(matches!(ro.update_label("ann-000001", CallLabel::Flat, "x"), Err(StoreError::ReadOnly)));
    assert!(matches!(ro.build_split(None, 0.2, 0), Err(StoreError::ReadOnly)));
}

#[test]
fn relabeling_appends_to_the_audit_trail() {
    let dir = tempfile::tempdir().unwrap();
    let mut store = Store::open(dir.path()).unwrap();
    let rec = noise_recording(&mut store, "r", 1.0, 3);
    let ids = naturals(&mut store, &rec, 11, 0);
    let id = &ids[0];
    let original = store.annotation(id).unwrap().label;
    store.update_label(id, CallLabel::Trill, "ann").unwrap();
    let a = store.update_label(id, CallLabel::Split, "bob").unwrap();
    assert_eq!(a.audit.len(), 2);
    assert_eq!((a.audit[0].from, a.audit[0].to), (original, CallLabel::Trill));
    assert_eq!((a.audit[1].from, a.audit[1].to, a.audit[1].annotator.as_str()), (CallLabel::Trill, CallLabel::Split, "bob"));
    drop(store);

    let store = Store::open(dir.path()).unwrap();
    assert_eq!(store.annotation(id).unwrap().audit.len(), 2);
    let splits = store.annotations(&AnnotationFilter { label: Some(CallLabel::Split), recording_id: None });
    assert!(splits.iter().any(|a| &a.id == id));
    assert!(splits.iter().all(|a| a.label == CallLabel::Split));
    assert!(store.annotations(&AnnotationFilter { label: None, recording_id: Some("nope".into()) }).is_empty());
    assert!(matches!(store.annotation("ann-999999"), Err(StoreError::UnknownId(_))));
}

#[test]
fn unknown_recording_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let mut store = Store::open(dir.path()).unwrap();
    let rec = noise_recording(&mut store, "r", 0.5, 4);
    naturals(&mut store, &rec, 1, 0);
    let mut bad = store.annotation("ann-000001").unwrap().clone();
    bad.recording_id = "ghost".into();
    let new = usvkit::datastore::NewAnnotation {
        recording_id: bad.recording_id,
        bbox: bad.bbox,
        label: bad.label,
        annotator: "x".into(),
        source: bad.source,
    };
    assert!(store.put_annotation(new).is_err());
}

#[test]
fn split_is_stratified_and_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let mut store = Store::open(dir.path()).unwrap();
    let rec = noise_recording(&mut store, "r", 1.0, 5);
    naturals(&mut store, &rec, 498, 0);
    let a = store.build_split(None, 0.2, 42).unwrap();
    let b = store.build_split(Some(1), 0.2, 42).unwrap();
    let c = store.build_split(Some(2), 0.2, 43).unwrap();
    assert_eq!(a.splits.val.len(), 100);
    assert_eq!(a.splits.train.len(), 398);
    assert_eq!(a.splits, b.splits);
    assert_ne!(a.splits, c.splits);
    assert_eq!((a.version, b.version, c.version), (1, 2, 3));
    assert_eq!(b.parent_version, Some(1));
    let l = labels(&store);
    for m in [&a, &b, &c] {
        m.check(&l).unwrap();
    }
    assert!(matches!(store.build_split(Some(9), 0.2, 0), Err(StoreError::UnknownManifest(9))));
}

#[test]
fn single_category_cannot_be_split() {
    let dir = tempfile::tempdir().unwrap();
    let mut store = Store::open(dir.path()).unwrap();
    let rec = noise_recording(&mut store, "r", 1.0, 6);
    let ids = naturals(&mut store, &rec, 3, 0);
    for id in &ids {
        store.update_label(id, CallLabel::Flat, "x").unwrap();
    }
    assert!(matches!(store.build_split(None, 0.2, 0), Err(StoreError::TooFewCategories(1))));
}

#[test]
fn only_accepted_synthetics_reach_train_and_never_val() {
    let dir = tempfile::tempdir().unwrap();
    let mut store = Store::open(dir.path()).unwrap();
    let rec = noise_recording(&mut store, "r", 1.0, 7);
    let ids = naturals(&mut store, &rec, 40, 0);
    let accepted = morph_and_decide(&mut store, &ids[..10], 16, 1, Verdict::Accept);
    let rejected = morph_and_decide(&mut store, &ids[10..15], 16, 2, Verdict::Reject);
    assert_eq!(store.synthetics(Some(ReviewStatus::Accepted)).len(), 10);
    assert_eq!(store.synthetics(Some(ReviewStatus::Rejected)).len(), 5);
    let m = store.build_split(None, 0.25, 0).unwrap();
    assert_eq!(m.synthetic_ids.len(), 10);
    assert_eq!(m.natural_count(), 40);
    assert_eq!(m.splits.val.len(), 10);
    assert!(accepted.iter().all(|id| m.splits.train.contains(id)));
    assert!(rejected.iter().all(|id| !m.annotation_ids.contains(id)));
    assert!(m.splits.val.iter().all(|id| id.starts_with("ann-")));
}

#[test]
fn verdicts_are_idempotent_and_conflicts_fail() {
    let dir = tempfile::tempdir().unwrap();
    let mut store = Store::open(dir.path()).unwrap();
    let rec = noise_recording(&mut store, "r", 1.0, 8);
    let ids = naturals(&mut store, &rec, 2, 0);
    let params = usvkit::synthgen::MorphParams::for_tile(16, 1);
    let syn = store.add_synthetics(usvkit::synthgen::propose(&seed_tiles(&store, &ids, 16), 1, &params).unwrap()).unwrap();
    let (s, changed) = store.decide(&syn[0], Verdict::Accept, "rev").unwrap();
    assert!(changed && s.review_status == ReviewStatus::Accepted && s.reviewer.as_deref() == Some("rev"));
    assert!(!store.decide(&syn[0], Verdict::Accept, "rev").unwrap().1);
    assert!(store.decide(&syn[0], Verdict::Reject, "rev").is_err());
    assert_eq!(store.synthetic(&syn[0]).unwrap().review_status, ReviewStatus::Accepted);
    assert_eq!(store.synthetic(&syn[1]).unwrap().review_status, ReviewStatus::Pending);
}

#[test]
fn export_writes_every_tile_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let mut store = Store::open(dir.path()).unwrap();
    let rec = noise_recording(&mut store, "r", 1.0, 9);
    let ids = naturals(&mut store, &rec, 22, 0);
    let syn = morph_and_decide(&mut store, &ids[..3], 24, 5, Verdict::Accept);
    let m = store.build_split(None, 0.2, 0).unwrap();
    let (spec, tile) = (SpectrogramParams::default(), TileParams::with_size(24));

    let out1 = tempfile::tempdir().unwrap();
    let out2 = tempfile::tempdir().unwrap();
    assert_eq!(store.export_tiles(m.version, &spec, &tile, out1.path()).unwrap(), 25);
    store.export_tiles(m.version, &spec, &tile, out2.path()).unwrap();
    let read = |d: &std::path::Path| -> BTreeMap<String, Vec<u8>> {
        std::fs::read_dir(d).unwrap().map(|e| e.unwrap().path()).map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(p).unwrap())).collect()
    };
    let (a, b) = (read(out1.path()), read(out2.path()));
    assert_eq!(a.len(), 26);
    assert_eq!(a.keys().filter(|k| k.ends_with(".png")).count(), 25);
    assert_eq!(a, b);
    assert_eq!(a[&format!("{}.png", syn[0])], store.synthetic_png(&syn[0]).unwrap());
    let doc: serde_json::Value = serde_json::from_slice(&a["manifest.json"]).unwrap();
    assert_eq!(doc["labels"].as_object().unwrap().len(), 25);
    let natural = SpectroImage::from_png(&a[&format!("{}.png", ids[0])]).unwrap();
    assert_eq!(natural.pixels.dim(), (24, 24));
}

#[test]
fn staged_growth_replay() {
    let dir = tempfile::tempdir().unwrap();
    let mut store = Store::open(dir.path()).unwrap();
    let rec = noise_recording(&mut store, "r", 1.0, 10);
    let first = naturals(&mut store, &rec, 401, 0);
    let m0 = store.build_split(None, 0.2, 0).unwrap();
    assert_eq!(m0.annotation_ids.len(), 401);

    let syn1 = morph_and_decide(&mut store, &first, 8, 1, Verdict::Accept);
    assert_eq!(syn1.len(), 401);
    let m1 = store.build_split(Some(m0.version), 0.2, 0).unwrap();
    assert_eq!((m1.annotation_ids.len(), m1.natural_count(), m1.synthetic_ids.len()), (802, 401, 401));

    let extra = naturals(&mut store, &rec, 14, 401);
    let mut seeds = first[..376].to_vec();
    seeds.extend(extra);
    let syn2 = morph_and_decide(&mut store, &seeds, 8, 2, Verdict::Accept);
    assert_eq!(syn2.len(), 390);
    let m2 = store.build_split(Some(m1.version), 0.2, 0).unwrap();
    assert_eq!((m2.annotation_ids.len(), m2.natural_count(), m2.synthetic_ids.len()), (1206, 415, 791));
    let l = labels(&store);
    for m in store.manifests() {
        m.check(&l).unwrap();
    }
}
