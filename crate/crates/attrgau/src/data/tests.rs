use super::*;

fn ev(session_id: u64, timestamp_ms: i64, item_id: u64) -> RawEvent {
    RawEvent {
        session_id,
        timestamp_ms,
        item_id,
    }
}

fn no_attrs() -> AttributeRecords {
    AttributeRecords::new(vec![], 0, 1, 1).unwrap()
}

/// Events where every item occurs often enough to survive the default
/// filter: `n` copies of the session [0, 1, 2, 3] at increasing times.
fn repeated_sessions(n: u64) -> Vec<RawEvent> {
    let mut events = Vec::new();
    for s in 0..n {
        for (j, item) in [0u64, 1, 2, 3].iter().enumerate() {
            events.push(ev(s, s as i64 * 10_000 + j as i64 * 100, *item));
        }
    }
    events
}

#[test]
fn parse_events_empty_and_sorting() {
    assert!(parse_events(b"".as_slice()).unwrap().is_empty());

    let out_of_order = b"7\t200\t3\n7\t100\t2\n";
    let events = parse_events(out_of_order.as_slice()).unwrap();
    assert_eq!(events[0].timestamp_ms, 100);
    assert_eq!(events[1].timestamp_ms, 200);
}

#[test]
fn parse_events_fixture_round_trip() {
    let fixture = "1\t1000\t42\n1\t2000\t43\n2\t1500\t42\n";
    let events = parse_events(fixture.as_bytes()).unwrap();
    assert_eq!(
        events,
        vec![ev(1, 1000, 42), ev(1, 2000, 43), ev(2, 1500, 42)]
    );
    let mut buf = Vec::new();
    write_events(&mut buf, &events).unwrap();
    assert_eq!(String::from_utf8(buf).unwrap(), fixture);
}

#[test]
fn parse_events_reports_line_numbers() {
    let bad = b"# comment\n1\t100\t5\n1\tx\t6\n";
    match parse_events(bad.as_slice()) {
        Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
        other => panic!("expected parse error, got {other:?}"),
    }
}

#[test]
fn sequence_splitting_produces_prefix_target_pairs() {
    // One session [a, b, c, d] (plus enough support to survive filtering).
    let bundle = preprocess(
        &repeated_sessions(10),
        &no_attrs(),
        &PreprocessOptions {
            test_fraction: 0.0,
            ..PreprocessOptions::default()
        },
    )
    .unwrap();
    // Every session splits into 3 examples.
    assert_eq!(bundle.stats.train_sessions, 10);
    assert_eq!(bundle.train.len(), 30);
    let first: Vec<&SessionExample> = bundle
        .train
        .iter()
        .filter(|e| e.origin_session == 0)
        .collect();
    assert_eq!(first[0].prefix, vec![0]);
    assert_eq!(first[0].target, 1);
    assert_eq!(first[1].prefix, vec![0, 1]);
    assert_eq!(first[1].target, 2);
    assert_eq!(first[2].prefix, vec![0, 1, 2]);
    assert_eq!(first[2].target, 3);
}

#[test]
fn length_one_sessions_contribute_nothing() {
    let mut events = repeated_sessions(10);
    events.push(ev(99, 999_999, 0));
    let bundle = preprocess(
        &events,
        &no_attrs(),
        &PreprocessOptions {
            test_fraction: 0.0,
            ..PreprocessOptions::default()
        },
    )
    .unwrap();
    assert!(bundle.train.iter().all(|e| e.origin_session != 99));
    assert_eq!(bundle.stats.train_sessions, 10);
}

#[test]
fn rare_item_filter_reaches_fixed_point() {
    let mut events = Vec::new();
    for s in 0..10u64 {
        let base = s as i64 * 10_000;
        events.push(ev(s, base, 0));
        if s < 4 {
            // 77 occurs four times globally: it must be filtered out.
            events.push(ev(s, base + 50, 77));
        }
        events.push(ev(s, base + 100, 1));
    }
    // A session that only pairs a rare item with a common one: after the
    // rare item goes, the session is too short and is dropped, which in
    // turn lowers the common item's count.
    let bundle = preprocess(
        &events,
        &no_attrs(),
        &PreprocessOptions {
            test_fraction: 0.0,
            ..PreprocessOptions::default()
        },
    )
    .unwrap();
    assert_eq!(bundle.num_items(), 2);
    assert!(bundle.item_map.to_new(77).is_none());
    for e in &bundle.train {
        assert!(e.prefix.iter().all(|&i| i < 2));
    }
    // [x, r, y] with rare r becomes [x, y]: sessions 0..4 still yield
    // one example each, with prefix [0] and target 1.
    let s0: Vec<_> = bundle
        .train
        .iter()
        .filter(|e| e.origin_session == 0)
        .collect();
    assert_eq!(s0.len(), 1);
    assert_eq!(s0[0].prefix, vec![0]);
}

#[test]
fn surviving_items_meet_the_count_threshold() {
    // Mixed-frequency items: after the fixed point, every remaining item
    // occurs at least min_item_count times in the surviving sessions.
    let mut events = Vec::new();
    for s in 0..15u64 {
        let base = s as i64 * 10_000;
        events.push(ev(s, base, s % 3));
        events.push(ev(s, base + 100, 3 + s % 2));
        if s % 4 == 0 {
            events.push(ev(s, base + 200, 90 + s));
        }
    }
    let bundle = preprocess(
        &events,
        &no_attrs(),
        &PreprocessOptions {
            test_fraction: 0.0,
            ..PreprocessOptions::default()
        },
    )
    .unwrap();
    let counts = bundle.train_interaction_counts();
    assert!(counts.iter().all(|&c| c >= 5), "counts {counts:?}");
}

#[test]
fn preprocess_rejects_everything_filtered() {
    let events = vec![ev(0, 0, 1), ev(0, 1, 2)];
    assert!(matches!(
        preprocess(&events, &no_attrs(), &PreprocessOptions::default()),
        Err(Error::Dataset(_))
    ));
}

#[test]
fn gap_segmentation_splits_sessions() {
    // Two bursts 31 minutes apart under one session id.
    let mut events = Vec::new();
    for s in 0..6u64 {
        let base = s as i64 * 10_000_000;
        events.push(ev(s, base, 0));
        events.push(ev(s, base + 1_000, 1));
        events.push(ev(s, base + 1_000 + 31 * 60_000, 2));
        events.push(ev(s, base + 2_000 + 31 * 60_000, 3));
    }
    let gapped = preprocess(
        &events,
        &no_attrs(),
        &PreprocessOptions {
            session_gap_ms: Some(30 * 60_000),
            test_fraction: 0.0,
            ..PreprocessOptions::default()
        },
    )
    .unwrap();
    // Each burst is its own session of length 2.
    assert_eq!(gapped.stats.train_sessions, 12);
    assert!(gapped.train.iter().all(|e| e.prefix.len() == 1));

    let ungapped = preprocess(
        &events,
        &no_attrs(),
        &PreprocessOptions {
            test_fraction: 0.0,
            ..PreprocessOptions::default()
        },
    )
    .unwrap();
    assert_eq!(ungapped.stats.train_sessions, 6);
}

#[test]
fn temporal_split_puts_recent_sessions_in_test() {
    let bundle = preprocess(
        &repeated_sessions(10),
        &no_attrs(),
        &PreprocessOptions {
            test_fraction: 0.2,
            ..PreprocessOptions::default()
        },
    )
    .unwrap();
    assert_eq!(bundle.stats.train_sessions, 8);
    assert_eq!(bundle.stats.test_sessions, 2);
    // Test sessions are strictly later than every training session.
    let max_train = bundle
        .train
        .iter()
        .map(|e| e.origin_session)
        .max()
        .unwrap();
    let min_test = bundle.test.iter().map(|e| e.origin_session).min().unwrap();
    assert!(max_train < min_test);

    let explicit = preprocess(
        &repeated_sessions(10),
        &no_attrs(),
        &PreprocessOptions {
            test_cutoff_ms: Some(80_000),
            ..PreprocessOptions::default()
        },
    )
    .unwrap();
    assert_eq!(explicit.stats.test_sessions, 2);
}

#[test]
fn test_only_items_are_dropped_from_test() {
    // Item 50 appears 5 times but only in the final (test) sessions.
    let mut events = repeated_sessions(20);
    for s in 15..20u64 {
        events.push(ev(s, s as i64 * 10_000 + 500, 50));
    }
    let bundle = preprocess(
        &events,
        &no_attrs(),
        &PreprocessOptions {
            test_fraction: 0.25,
            ..PreprocessOptions::default()
        },
    )
    .unwrap();
    assert!(bundle.item_map.to_new(50).is_none());
    for e in &bundle.test {
        assert!(e.prefix.iter().all(|&i| (i as usize) < bundle.num_items()));
        assert!((e.target as usize) < bundle.num_items());
    }
}

#[test]
fn remapping_is_a_bijection_onto_contiguous_ids() {
    let bundle = preprocess(
        &repeated_sessions(12),
        &no_attrs(),
        &PreprocessOptions::default(),
    )
    .unwrap();
    let v = bundle.num_items();
    for new_id in 0..v as u32 {
        let orig = bundle.item_map.to_original(new_id).unwrap();
        assert_eq!(bundle.item_map.to_new(orig), Some(new_id));
    }
    assert!(bundle.item_map.to_original(v as u32).is_none());
}

#[test]
fn attribute_triples_of_dropped_items_are_discarded() {
    let attrs = AttributeRecords::new(
        vec![
            AttributeTriple { item: 0, parent: 0, leaf: 0 },
            AttributeTriple { item: 3, parent: 0, leaf: 1 },
            AttributeTriple { item: 99, parent: 0, leaf: 1 },
        ],
        100,
        1,
        2,
    )
    .unwrap();
    let bundle = preprocess(
        &repeated_sessions(10),
        &attrs,
        &PreprocessOptions {
            test_fraction: 0.0,
            ..PreprocessOptions::default()
        },
    )
    .unwrap();
    assert_eq!(bundle.stats.dropped_triples, 1);
    assert_eq!(bundle.records.triples.len(), 2);
    assert_eq!(bundle.records.num_items, bundle.num_items());
}

#[test]
fn subsample_full_fraction_is_identity() {
    let bundle = preprocess(
        &repeated_sessions(10),
        &no_attrs(),
        &PreprocessOptions::default(),
    )
    .unwrap();
    let same = subsample_train(&bundle, 1.0, 7).unwrap();
    assert_eq!(same, bundle);
}

#[test]
fn subsample_keeps_exact_session_count_and_is_deterministic() {
    let bundle = preprocess(
        &repeated_sessions(100),
        &no_attrs(),
        &PreprocessOptions {
            test_fraction: 0.0,
            ..PreprocessOptions::default()
        },
    )
    .unwrap();
    assert_eq!(bundle.stats.train_sessions, 100);
    let half = subsample_train(&bundle, 0.5, 3).unwrap();
    assert_eq!(half.stats.train_sessions, 50);
    // All examples of a kept origin session survive together.
    let kept: BTreeSet<u64> = half.train.iter().map(|e| e.origin_session).collect();
    assert_eq!(kept.len(), 50);
    assert_eq!(half.train.len(), 50 * 3);
    assert_eq!(half.test, bundle.test);

    let again = subsample_train(&bundle, 0.5, 3).unwrap();
    assert_eq!(again, half);
    let other_seed = subsample_train(&bundle, 0.5, 4).unwrap();
    assert_ne!(other_seed.train, half.train);
}

#[test]
fn subsample_rejects_bad_fraction() {
    let bundle = preprocess(
        &repeated_sessions(10),
        &no_attrs(),
        &PreprocessOptions::default(),
    )
    .unwrap();
    assert!(subsample_train(&bundle, 0.0, 1).is_err());
    assert!(subsample_train(&bundle, 1.5, 1).is_err());
}

#[test]
fn synth_full_coherence_links_consecutive_leaves() {
    let config = SynthConfig::new(50, 3, 6, 200, 1.0);
    let (events, records) = synth_generate(&config, 11).unwrap();
    let leaf_of: Vec<u32> = {
        let mut v = vec![0; 50];
        for t in &records.triples {
            v[t.item as usize] = t.leaf;
        }
        v
    };
    let mut by_session: BTreeMap<u64, Vec<u64>> = BTreeMap::new();
    for e in &events {
        by_session.entry(e.session_id).or_default().push(e.item_id);
    }
    for items in by_session.values() {
        for w in items.windows(2) {
            assert_eq!(leaf_of[w[0] as usize], leaf_of[w[1] as usize]);
        }
    }
}

#[test]
fn synth_is_bitwise_reproducible() {
    let config = SynthConfig::new(30, 2, 5, 100, 0.7);
    let (e1, r1) = synth_generate(&config, 42).unwrap();
    let (e2, r2) = synth_generate(&config, 42).unwrap();
    assert_eq!(e1, e2);
    assert_eq!(r1, r2);
    let (e3, _) = synth_generate(&config, 43).unwrap();
    assert_ne!(e1, e3);
}

#[test]
fn synth_zero_coherence_transitions_are_uniform() {
    // Chi-square goodness of fit over next-item draws: with coherence 0
    // the transition target is uniform over the catalog. Critical value
    // for df = 19 at alpha = 0.01 is 36.19.
    let items = 20usize;
    let config = SynthConfig {
        min_session_len: 6,
        max_session_len: 6,
        ..SynthConfig::new(items, 2, 4, 25_000, 0.0)
    };
    let (events, _) = synth_generate(&config, 5).unwrap();
    let mut counts = vec![0u64; items];
    let mut draws = 0u64;
    let mut by_session: BTreeMap<u64, Vec<u64>> = BTreeMap::new();
    for e in &events {
        by_session.entry(e.session_id).or_default().push(e.item_id);
    }
    for items_seq in by_session.values() {
        for &next in &items_seq[1..] {
            counts[next as usize] += 1;
            draws += 1;
        }
    }
    assert!(draws >= 100_000, "only {draws} transition draws");
    let expected = draws as f64 / items as f64;
    let chi2: f64 = counts
        .iter()
        .map(|&o| {
            let d = o as f64 - expected;
            d * d / expected
        })
        .sum();
    assert!(chi2 < 36.19, "chi-square statistic {chi2}");
}

#[test]
fn synth_validates_parameters() {
    assert!(synth_generate(&SynthConfig::new(0, 1, 1, 1, 0.5), 1).is_err());
    assert!(synth_generate(&SynthConfig::new(5, 1, 1, 5, 1.5), 1).is_err());
    let bad_pop = SynthConfig {
        popularity_exponent: -1.0,
        ..SynthConfig::new(5, 1, 1, 5, 0.5)
    };
    assert!(synth_generate(&bad_pop, 1).is_err());
}

#[test]
fn synth_popularity_exponent_skews_item_counts() {
    let uniform = SynthConfig {
        popularity_exponent: 0.0,
        ..SynthConfig::new(100, 2, 5, 2000, 0.8)
    };
    let skewed = SynthConfig {
        popularity_exponent: 1.0,
        ..SynthConfig::new(100, 2, 5, 2000, 0.8)
    };
    let top_decile_share = |config: &SynthConfig| {
        let (events, _) = synth_generate(config, 3).unwrap();
        let mut counts = vec![0usize; 100];
        for e in &events {
            counts[e.item_id as usize] += 1;
        }
        counts.sort_unstable_by(|a, b| b.cmp(a));
        let top: usize = counts[..10].iter().sum();
        top as f64 / events.len() as f64
    };
    let uniform_share = top_decile_share(&uniform);
    let skewed_share = top_decile_share(&skewed);
    assert!(uniform_share < 0.2, "uniform top-decile share {uniform_share}");
    assert!(skewed_share > 0.35, "skewed top-decile share {skewed_share}");
}

#[test]
fn bundle_cache_round_trips_byte_exact() {
    let attrs = AttributeRecords::new(
        vec![
            AttributeTriple { item: 0, parent: 0, leaf: 1 },
            AttributeTriple { item: 2, parent: 0, leaf: 0 },
        ],
        10,
        1,
        2,
    )
    .unwrap();
    let bundle = preprocess(
        &repeated_sessions(15),
        &attrs,
        &PreprocessOptions::default(),
    )
    .unwrap();
    let mut buf = Vec::new();
    bundle.write(&mut buf).unwrap();
    let loaded = DatasetBundle::read(&mut buf.as_slice()).unwrap();
    assert_eq!(loaded, bundle);
    let mut buf2 = Vec::new();
    loaded.write(&mut buf2).unwrap();
    assert_eq!(buf, buf2);
}
