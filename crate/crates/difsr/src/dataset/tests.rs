use super::*;

fn write_tsv(dir: &Path, rows: &[(&str, &str, i64)]) -> std::path::PathBuf {
    let path = dir.join("interactions.tsv");
    let mut body = String::from("user_id\titem_id\ttimestamp\n");
    for (u, i, t) in rows {
        body.push_str(&format!("{u}\t{i}\t{t}\n"));
    }
    std::fs::write(&path, body).unwrap();
    path
}

fn write_attrs(dir: &Path, lines: &[&str]) -> std::path::PathBuf {
    let path = dir.join("attributes.jsonl");
    std::fs::write(&path, lines.join("\n")).unwrap();
    path
}

fn ingest_rows(rows: &[(&str, &str, i64)], attrs: &[&str]) -> Result<InteractionDataset> {
    let dir = tempfile::tempdir().unwrap();
    let tsv = write_tsv(dir.path(), rows);
    let jsonl = write_attrs(dir.path(), attrs);
    ingest(&tsv, &jsonl, DEFAULT_MAX_VALUES_PER_ITEM)
}

/// Brute-force 5-core oracle: recompute counts from scratch and filter
/// until nothing changes, with no shortcuts.
fn five_core_oracle(mut rows: Vec<(String, String)>) -> Vec<(String, String)> {
    loop {
        let mut changed = false;
        let users: Vec<String> = rows.iter().map(|r| r.0.clone()).collect();
        let items: Vec<String> = rows.iter().map(|r| r.1.clone()).collect();
        let count = |xs: &[String], x: &str| xs.iter().filter(|y| *y == x).count();
        let kept: Vec<(String, String)> = rows
            .iter()
            .filter(|(u, i)| count(&users, u) >= 5 && count(&items, i) >= 5)
            .cloned()
            .collect();
        if kept.len() != rows.len() {
            changed = true;
        }
        rows = kept;
        if !changed {
            return rows;
        }
    }
}

fn dense_user_rows(n_users: usize, items_per_user: &[&[&str]]) -> Vec<(String, String, i64)> {
    let mut rows = Vec::new();
    for u in 0..n_users {
        for (t, item) in items_per_user[u].iter().enumerate() {
            rows.push((format!("u{u}"), item.to_string(), t as i64));
        }
    }
    rows
}

#[test]
fn user_with_four_interactions_is_removed() {
    // Five users interact with five shared items five times each; one extra
    // user has only four rows.
    let mut rows: Vec<(String, String, i64)> = Vec::new();
    for u in 0..5 {
        for i in 0..5 {
            rows.push((format!("u{u}"), format!("i{i}"), i as i64));
        }
    }
    for i in 0..4 {
        rows.push(("weak".into(), format!("i{i}"), i as i64));
    }
    let refs: Vec<(&str, &str, i64)> = rows.iter().map(|(u, i, t)| (u.as_str(), i.as_str(), *t)).collect();
    let ds = ingest_rows(&refs, &[]).unwrap();
    assert_eq!(ds.users.len(), 5);
    assert!(!ds.users.iter().any(|u| u == "weak"));
    assert!(ds.sequences.iter().all(|s| s.len() >= 5));
}

#[test]
fn cascading_removal_matches_fixpoint_oracle() {
    // A 10-user toy where dropping one weak user pushes an item below five
    // occurrences, which in turn shortens another user below five.
    let mut rows: Vec<(String, String, i64)> = Vec::new();
    for u in 0..6 {
        for i in 0..6 {
            rows.push((format!("core{u}"), format!("a{i}"), i as i64));
        }
    }
    // "chain" holds item `b` occurrences at five together with weak users.
    for k in 0..5 {
        rows.push(("chain".into(), format!("a{k}"), 10 + k));
    }
    rows.push(("chain".into(), "b".into(), 20));
    for w in 0..3 {
        rows.push((format!("weak{w}"), "b".into(), 30 + w));
        rows.push((format!("weak{w}"), "a0".into(), 40 + w));
    }
    rows.push(("weak3".into(), "b".into(), 50));

    let refs: Vec<(&str, &str, i64)> = rows.iter().map(|(u, i, t)| (u.as_str(), i.as_str(), *t)).collect();
    let ds = ingest_rows(&refs, &[]).unwrap();

    let oracle = five_core_oracle(rows.iter().map(|(u, i, _)| (u.clone(), i.clone())).collect());
    let oracle_users: HashSet<&str> = oracle.iter().map(|(u, _)| u.as_str()).collect();
    let oracle_items: HashSet<&str> = oracle.iter().map(|(_, i)| i.as_str()).collect();

    assert_eq!(
        ds.users.iter().map(|s| s.as_str()).collect::<HashSet<_>>(),
        oracle_users
    );
    assert_eq!(
        ds.item_ids.iter().map(|s| s.as_str()).collect::<HashSet<_>>(),
        oracle_items
    );
    assert_eq!(ds.action_count(), oracle.len());
    // The cascade actually fired: item b and the weak users are gone.
    assert!(!oracle_items.contains("b"));
}

#[test]
fn refiltering_output_changes_nothing() {
    let mut rows: Vec<(String, String, i64)> = Vec::new();
    for u in 0..8 {
        for i in 0..8 {
            if (u + i) % 3 != 0 {
                rows.push((format!("u{u}"), format!("i{i}"), (u * 10 + i) as i64));
            }
        }
    }
    for w in 0..4 {
        rows.push((format!("w{w}"), "rare".into(), 100 + w));
    }
    let refs: Vec<(&str, &str, i64)> = rows.iter().map(|(u, i, t)| (u.as_str(), i.as_str(), *t)).collect();
    let Ok(ds) = ingest_rows(&refs, &[]) else {
        panic!("dataset should survive filtering");
    };
    // Re-running the filter on the surviving interactions is a no-op.
    let survivors: Vec<(String, String)> = ds
        .sequences
        .iter()
        .enumerate()
        .flat_map(|(u, seq)| {
            seq.iter()
                .map(move |&i| (u, i))
                .map(|(u, i)| (ds.users[u].clone(), ds.item_id(i).unwrap().to_string()))
        })
        .collect();
    assert_eq!(five_core_oracle(survivors.clone()).len(), survivors.len());
}

#[test]
fn empty_input_is_empty_dataset_error() {
    let res = ingest_rows(&[], &[]);
    assert!(matches!(res, Err(Error::EmptyDataset)));
}

#[test]
fn malformed_row_reports_line_number() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("interactions.tsv");
    std::fs::write(&path, "user_id\titem_id\ttimestamp\nu1\ti1\tnot_a_number\n").unwrap();
    let jsonl = write_attrs(dir.path(), &[]);
    match ingest(&path, &jsonl, 8) {
        Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
        other => panic!("expected parse error, got {other:?}"),
    }
}

#[test]
fn chronological_order_with_stable_ties() {
    let seqs: Vec<&[&str]> = vec![&["a", "b", "c", "d", "e"]; 5];
    let mut rows = dense_user_rows(5, &seqs);
    // u0 gets shuffled timestamps plus a tie decided by file order.
    rows.retain(|(u, _, _)| u != "u0");
    rows.insert(0, ("u0".into(), "c".into(), 5));
    rows.insert(1, ("u0".into(), "a".into(), 1));
    rows.insert(2, ("u0".into(), "e".into(), 5)); // ties with c, comes later
    rows.insert(3, ("u0".into(), "b".into(), 2));
    rows.insert(4, ("u0".into(), "d".into(), 0));
    let refs: Vec<(&str, &str, i64)> = rows.iter().map(|(u, i, t)| (u.as_str(), i.as_str(), *t)).collect();
    let ds = ingest_rows(&refs, &[]).unwrap();
    let u0 = ds.user_index("u0").unwrap();
    let seq: Vec<&str> = ds.sequences[u0].iter().map(|&i| ds.item_id(i).unwrap()).collect();
    assert_eq!(seq, vec!["d", "a", "b", "c", "e"]);
}

#[test]
fn vocab_round_trip_is_identity() {
    let seqs: Vec<&[&str]> = vec![&["a", "b", "c", "d", "e"]; 5];
    let rows = dense_user_rows(5, &seqs);
    let refs: Vec<(&str, &str, i64)> = rows.iter().map(|(u, i, t)| (u.as_str(), i.as_str(), *t)).collect();
    let ds = ingest_rows(&refs, &[]).unwrap();
    for ix in 1..=ds.item_count() as u32 {
        let id = ds.item_id(ix).unwrap();
        assert_eq!(ds.item_index(id), Some(ix));
    }
}

#[test]
fn attributes_parsed_capped_and_defaulted() {
    let seqs: Vec<&[&str]> = vec![&["a", "b", "c", "d", "e"]; 5];
    let rows = dense_user_rows(5, &seqs);
    let refs: Vec<(&str, &str, i64)> = rows.iter().map(|(u, i, t)| (u.as_str(), i.as_str(), *t)).collect();
    let dir = tempfile::tempdir().unwrap();
    let tsv = write_tsv(dir.path(), &refs);
    let jsonl = write_attrs(
        dir.path(),
        &[
            r#"{"item_id": "a", "attributes": {"cat": ["x", "y", "x"], "brand": ["bx"]}}"#,
            r#"{"item_id": "b", "attributes": {"cat": ["y"]}}"#,
            r#"{"item_id": "zz_not_in_data", "attributes": {"cat": ["q"]}}"#,
            r#"{"item_id": "c", "attributes": {"cat": ["c1", "c2", "c3"]}}"#,
        ],
    );
    let ds = ingest(&tsv, &jsonl, 2).unwrap();
    assert_eq!(
        ds.attributes.iter().map(|a| a.name.as_str()).collect::<Vec<_>>(),
        vec!["brand", "cat"]
    );
    let cat = &ds.attributes[1];
    let a = ds.item_index("a").unwrap() as usize;
    let b = ds.item_index("b").unwrap() as usize;
    let c = ds.item_index("c").unwrap() as usize;
    let d = ds.item_index("d").unwrap() as usize;
    // Duplicate value dropped, cap of 2 enforced, missing item → empty.
    assert_eq!(cat.per_item[a].len(), 2);
    assert_eq!(cat.per_item[b].len(), 1);
    assert_eq!(cat.per_item[c].len(), 2);
    assert!(cat.per_item[d].is_empty());
    assert_eq!(cat.max_per_item, 2);
    // Value "q" of the unknown item never entered the vocabulary.
    assert!(!cat.values.iter().any(|v| v == "q"));
    // Indices are within vocab.
    assert!(cat.per_item.iter().flatten().all(|&v| v as usize <= cat.values.len() && v != PAD));
}

// ── splits ───────────────────────────────────────────────────────────────

fn toy_dataset(seq_lens: &[usize]) -> InteractionDataset {
    // Hand-built dataset bypassing ingest so short sequences survive.
    let mut sequences = Vec::new();
    let mut next = 1u32;
    let mut max_item = 0u32;
    for &n in seq_lens {
        let seq: Vec<u32> = (0..n).map(|k| ((next + k as u32 - 1) % 7) + 1).collect();
        max_item = max_item.max(*seq.iter().max().unwrap_or(&1));
        next += 1;
        sequences.push(seq);
    }
    InteractionDataset {
        users: (0..seq_lens.len()).map(|u| format!("u{u}")).collect(),
        sequences,
        item_ids: (1..=max_item).map(|i| format!("i{i}")).collect(),
        attributes: vec![],
    }
}

#[test]
fn split_unrolls_the_definition() {
    // Sequence [a,b,c,d]: train {[a]→b, [a,b]→c}, valid ([a,b]→c),
    // test ([a,b,c]→d).
    let ds = toy_dataset(&[4]);
    let seq = ds.sequences[0].clone();
    let views = split_leave_one_out(&ds);
    assert_eq!(
        views.train,
        vec![
            Sample { user: 0, ctx_len: 1, target: seq[1] },
            Sample { user: 0, ctx_len: 2, target: seq[2] },
        ]
    );
    assert_eq!(views.valid, vec![Sample { user: 0, ctx_len: 2, target: seq[2] }]);
    assert_eq!(views.test, vec![Sample { user: 0, ctx_len: 3, target: seq[3] }]);
}

#[test]
fn length_three_sequence_gives_one_training_sample() {
    let ds = toy_dataset(&[3]);
    let views = split_leave_one_out(&ds);
    assert_eq!(views.train.len(), 1);
    assert_eq!(views.train[0].ctx_len, 1);
    assert_eq!(views.valid.len(), 1);
    assert_eq!(views.test.len(), 1);
}

#[test]
fn training_sample_count_matches_brute_force() {
    // 20 users with assorted lengths ≥ 3.
    let lens: Vec<usize> = (0..20).map(|u| 3 + (u * 7) % 9).collect();
    let ds = toy_dataset(&lens);
    let views = split_leave_one_out(&ds);
    let expected: usize = lens.iter().map(|&n| n.saturating_sub(2)).sum();
    assert_eq!(views.train.len(), expected);
}

#[test]
fn test_target_never_used_for_training() {
    let lens: Vec<usize> = (0..10).map(|u| 3 + u % 5).collect();
    let ds = toy_dataset(&lens);
    let views = split_leave_one_out(&ds);
    for s in &views.train {
        let n = ds.sequences[s.user].len();
        assert!(s.ctx_len + 1 <= n - 1, "training context leaks into the test slot");
    }
}

#[test]
fn short_sequences_counted_and_trained() {
    let ds = toy_dataset(&[2, 5, 1]);
    let views = split_leave_one_out(&ds);
    assert_eq!(views.short_sequences, 2);
    assert_eq!(views.valid.len(), 1);
    assert_eq!(views.test.len(), 1);
    // Length-2 user contributes its one prefix; length-1 user nothing.
    assert_eq!(views.train.len(), 1 + 3);
}

// ── batches ──────────────────────────────────────────────────────────────

#[test]
fn short_context_is_left_padded() {
    let ds = toy_dataset(&[5]);
    let b = batch_of(&ds, &[Sample { user: 0, ctx_len: 3, target: ds.sequences[0][3] }], 5);
    assert_eq!(b.items[0], PAD);
    assert_eq!(b.items[1], PAD);
    assert_eq!(&b.items[2..5], &ds.sequences[0][..3]);
    assert_eq!(b.lengths[0], 3);
}

#[test]
fn long_context_keeps_most_recent() {
    let ds = toy_dataset(&[8]);
    let b = batch_of(&ds, &[Sample { user: 0, ctx_len: 7, target: ds.sequences[0][7] }], 5);
    assert_eq!(&b.items[..5], &ds.sequences[0][2..7]);
    assert_eq!(b.lengths[0], 5);
}

#[test]
fn fixed_seed_replays_identical_batches() {
    let lens: Vec<usize> = (0..15).map(|u| 4 + u % 6).collect();
    let ds = toy_dataset(&lens);
    let views = split_leave_one_out(&ds);
    let collect = |epoch: u64| -> Vec<Vec<u32>> {
        make_batches(&ds, &views.train, 4, 8, 99, epoch, true)
            .map(|b| b.items.clone())
            .collect()
    };
    assert_eq!(collect(3), collect(3));
    assert_ne!(collect(3), collect(4), "different epochs should reshuffle");
}

#[test]
fn cache_round_trip_preserves_everything() {
    let seqs: Vec<&[&str]> = vec![&["a", "b", "c", "d", "e", "f"]; 6];
    let rows = dense_user_rows(6, &seqs);
    let refs: Vec<(&str, &str, i64)> = rows.iter().map(|(u, i, t)| (u.as_str(), i.as_str(), *t)).collect();
    let dir = tempfile::tempdir().unwrap();
    let tsv = write_tsv(dir.path(), &refs);
    let jsonl = write_attrs(
        dir.path(),
        &[r#"{"item_id": "a", "attributes": {"cat": ["x", "y"]}}"#],
    );
    let ds = ingest(&tsv, &jsonl, 8).unwrap();
    let cache = dir.path().join("dataset.bin");
    write_cache(&ds, &cache).unwrap();
    let back = read_cache(&cache).unwrap();
    assert_eq!(back.users, ds.users);
    assert_eq!(back.sequences, ds.sequences);
    assert_eq!(back.item_ids, ds.item_ids);
    assert_eq!(back.attributes.len(), 1);
    assert_eq!(back.attributes[0].values, ds.attributes[0].values);
    assert_eq!(back.attributes[0].per_item, ds.attributes[0].per_item);
}

#[test]
fn manifest_mirrors_statistics() {
    let seqs: Vec<&[&str]> = vec![&["a", "b", "c", "d", "e"]; 5];
    let rows = dense_user_rows(5, &seqs);
    let refs: Vec<(&str, &str, i64)> = rows.iter().map(|(u, i, t)| (u.as_str(), i.as_str(), *t)).collect();
    let ds = ingest_rows(&refs, &[]).unwrap();
    let m = ds.manifest();
    assert_eq!(m.users, 5);
    assert_eq!(m.items, 5);
    assert_eq!(m.actions, 25);
    assert!((m.avg_actions_per_user - 5.0).abs() < 1e-12);
    assert!((m.sparsity_percent - 0.0).abs() < 1e-12);
}
