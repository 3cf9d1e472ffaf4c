#![allow(dead_code)]

//! Independent oracles and the criterion checks shared by the acceptance
//! target and the per-area suites.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use chrono::{DateTime, Datelike, Days, NaiveDate};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use citykit::broker::{
    parse_q, AttrFilter, Comparator, FnSink, NotificationQueue, NotificationTarget, Subscription,
};
use citykit::data_models::{validate_batch, RuleKind, SchemaRegistry};
use citykit::estimator::{fit_ridge, lag_matrix, train, Algorithm, Estimator, Profile, Sample, SeriesKey, TrainingConfig};
use citykit::feedgen::{
    generate_corpus, historical_records, random_network, random_realtime, series_entity_ids, toy_feed,
    CityFixture, DefectPlan, RandomNetworkSpec,
};
use citykit::gtfs::{feed_to_ngsi, ngsi_to_gtfs, read_feed_zip, write_feed_zip, GtfsFeed, GtfsRtFeed};
use citykit::harness::{run_scenario_routing, RoutingScenarioConfig};
use citykit::routing::{GraphParams, PlanRequest, Router};
use citykit::transformers::ngsi_to_ngsild;
use citykit::{Attribute, Broker, ContextBroker, NgsiEntity, Query, SimClock};

pub fn default_fixture() -> CityFixture {
    CityFixture::load(concat!(env!("CARGO_MANIFEST_DIR"), "/../../fixtures/default.toml").as_ref())
        .expect("default fixture")
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[derive(Debug, Clone)]
pub struct Outcome {
    pub passed: bool,
    pub detail: String,
}

impl Outcome {
    fn new(passed: bool, detail: impl Into<String>) -> Self {
        Self {
            passed,
            detail: detail.into(),
        }
    }
}

// ------------------------------------------------------------ broker oracle

const TYPES: [&str; 3] = ["Alpha", "Beta", "Gamma"];
const WORDS: [&str; 5] = ["free", "occupied", "closed", "alpha", "Zed"];

pub fn random_entity(r: &mut ChaCha8Rng) -> NgsiEntity {
    let id = format!("{}{}", ["P", "Q", "R"][r.random_range(0..3)], r.random_range(0..25));
    let mut e = NgsiEntity::new(id, TYPES[r.random_range(0..3)]);
    if r.random_bool(0.8) {
        let n = if r.random_bool(0.7) {
            Attribute::integer(r.random_range(-5..20))
        } else {
            Attribute::number(f64::from(r.random_range(-50..200)) / 10.0)
        };
        e = e.with("n", n);
    }
    if r.random_bool(0.7) {
        e = e.with("s", Attribute::text(WORDS[r.random_range(0..WORDS.len())]));
    }
    if r.random_bool(0.4) {
        e = e.with("b", Attribute::new("Boolean", r.random_bool(0.5)));
    }
    if r.random_bool(0.3) {
        // same name, clashing value kinds across entities
        e = e.with("m", Attribute::text(format!("{}", r.random_range(0..5))));
    } else if r.random_bool(0.3) {
        e = e.with("m", Attribute::integer(r.random_range(0..5)));
    }
    e
}

fn random_filter(r: &mut ChaCha8Rng) -> AttrFilter {
    let ops = [
        Comparator::Eq,
        Comparator::Ne,
        Comparator::Lt,
        Comparator::Le,
        Comparator::Gt,
        Comparator::Ge,
    ];
    let op = ops[r.random_range(0..ops.len())];
    let attr = ["n", "s", "b", "m", "absent"][r.random_range(0..5)];
    let literal: Value = match r.random_range(0..4) {
        0 => json!(r.random_range(-5..20)),
        1 => json!(f64::from(r.random_range(-50..200)) / 10.0 + 0.05),
        2 => json!(WORDS[r.random_range(0..WORDS.len())]),
        _ if matches!(op, Comparator::Eq | Comparator::Ne) => json!(r.random_bool(0.5)),
        _ => json!(format!("{}", r.random_range(0..5))),
    };
    AttrFilter::new(attr, op, literal)
}

const ID_PATTERNS: [&str; 6] = ["P.*", "Q1.*", "P3", "P1|Q2", "R.*|P2.*", ".*"];

/// Id patterns are alternations of literals, each optionally ending in `.*`.
fn id_matches(pattern: &str, id: &str) -> bool {
    pattern.split('|').any(|alt| match alt.strip_suffix(".*") {
        Some(prefix) => id.starts_with(prefix),
        None => id == alt,
    })
}

fn num(v: &Value) -> Option<f64> {
    if v.is_number() {
        v.as_f64()
    } else {
        None
    }
}

fn filter_holds(f: &AttrFilter, e: &NgsiEntity) -> bool {
    let Some(a) = e.attributes.get(&f.attribute) else {
        return false;
    };
    let v = &a.value;
    let equal = match (num(v), num(&f.literal)) {
        (Some(x), Some(y)) => x == y,
        _ => v == &f.literal,
    };
    let ord = match (v, &f.literal) {
        (Value::String(x), Value::String(y)) => Some(x.as_str().cmp(y.as_str())),
        _ => match (num(v), num(&f.literal)) {
            (Some(x), Some(y)) => x.partial_cmp(&y),
            _ => None,
        },
    };
    use std::cmp::Ordering::*;
    match f.op {
        Comparator::Eq => equal,
        Comparator::Ne => !equal,
        Comparator::Lt => ord == Some(Less),
        Comparator::Le => matches!(ord, Some(Less | Equal)),
        Comparator::Gt => ord == Some(Greater),
        Comparator::Ge => matches!(ord, Some(Greater | Equal)),
    }
}

/// Linear scan over a plain list, sorted by id afterwards.
pub fn scan(store: &[NgsiEntity], q: &Query) -> Vec<NgsiEntity> {
    let mut out: Vec<NgsiEntity> = store
        .iter()
        .filter(|e| q.entity_type.as_ref().is_none_or(|t| &e.entity_type == t))
        .filter(|e| q.id_pattern.as_ref().is_none_or(|p| id_matches(p, &e.id)))
        .filter(|e| q.filters.iter().all(|f| filter_holds(f, e)))
        .cloned()
        .collect();
    out.sort_by(|a, b| a.id.cmp(&b.id));
    out
}

/// One randomized store and query; returns a mismatch description.
pub fn query_case(seed: u64) -> Result<usize, String> {
    let mut r = rng(seed);
    let broker = Broker::new();
    let mut model: Vec<NgsiEntity> = Vec::new();
    for _ in 0..r.random_range(0..60) {
        if !model.is_empty() && r.random_bool(0.1) {
            let i = r.random_range(0..model.len());
            let e = model.remove(i);
            broker.delete_entity(&e.id).map_err(|e| e.to_string())?;
            continue;
        }
        let e = random_entity(&mut r);
        match model.iter_mut().find(|m| m.id == e.id) {
            Some(slot) => *slot = e.clone(),
            None => model.push(e.clone()),
        }
        broker.upsert_entity(e).map_err(|e| e.to_string())?;
    }
    let mut q = Query::all();
    if r.random_bool(0.5) {
        q.entity_type = Some(TYPES[r.random_range(0..3)].to_string());
    }
    if r.random_bool(0.5) {
        q.id_pattern = Some(ID_PATTERNS[r.random_range(0..ID_PATTERNS.len())].to_string());
    }
    for _ in 0..r.random_range(0..3) {
        q.filters.push(random_filter(&mut r));
    }
    let expected = scan(&model, &q);
    let got = broker.query_entities(&q).map_err(|e| e.to_string())?;
    if got != expected {
        return Err(format!(
            "seed {seed}: query {:?} q={} got {:?} expected {:?}",
            q,
            q.q_string(),
            got.iter().map(|e| &e.id).collect::<Vec<_>>(),
            expected.iter().map(|e| &e.id).collect::<Vec<_>>()
        ));
    }
    // q-string round trip answers the same
    let mut reparsed = q.clone();
    reparsed.filters = parse_q(&q.q_string()).map_err(|e| e.to_string())?;
    if broker.query_entities(&reparsed).map_err(|e| e.to_string())? != expected {
        return Err(format!("seed {seed}: q string {} answers differently", q.q_string()));
    }
    Ok(expected.len())
}

struct SubModel {
    id: String,
    entity_type: String,
    id_pattern: String,
    watched: BTreeSet<String>,
    queue: NotificationQueue,
}

impl SubModel {
    fn fires<'a>(&self, e: &NgsiEntity, mut changed: impl Iterator<Item = &'a String>) -> bool {
        (self.entity_type == "*" || self.entity_type == e.entity_type)
            && id_matches(&self.id_pattern, &e.id)
            && (self.watched.is_empty() || changed.any(|a| self.watched.contains(a)))
    }
}

/// Unthrottled subscriptions get one notification per matching commit, in
/// commit order, carrying the committed snapshot.
pub fn notification_completeness(seed: u64, commits: usize) -> Result<usize, String> {
    let mut r = rng(seed);
    let broker = Broker::new();
    let specs: [(&str, &str, &[&str]); 5] = [
        ("*", ".*", &[]),
        ("Alpha", ".*", &[]),
        ("Beta", "P.*", &[]),
        ("*", ".*", &["n"]),
        ("Gamma", "Q1.*|R.*", &["s", "b"]),
    ];
    let mut subs = Vec::new();
    for (t, p, w) in specs {
        let queue = NotificationQueue::new();
        let id = broker
            .subscribe(Subscription::new(t, queue.sink()).id_pattern(p).watch(w.iter().copied()))
            .map_err(|e| e.to_string())?;
        subs.push(SubModel {
            id,
            entity_type: t.into(),
            id_pattern: p.into(),
            watched: w.iter().map(|s| s.to_string()).collect(),
            queue,
        });
    }
    let mut expected: Vec<Vec<NgsiEntity>> = vec![Vec::new(); subs.len()];
    let mut current: BTreeMap<String, NgsiEntity> = BTreeMap::new();
    for _ in 0..commits {
        let patch_target = (!current.is_empty() && r.random_bool(0.4))
            .then(|| current.keys().nth(r.random_range(0..current.len())).cloned())
            .flatten();
        match patch_target {
            Some(id) => {
                let mut patch = BTreeMap::new();
                if r.random_bool(0.6) {
                    patch.insert("n".to_string(), Attribute::integer(r.random_range(0..9)));
                }
                if r.random_bool(0.6) {
                    patch.insert("s".to_string(), Attribute::text(WORDS[r.random_range(0..5)]));
                }
                if patch.is_empty() {
                    patch.insert("z".to_string(), Attribute::integer(1));
                }
                let snapshot = broker.update_attributes(&id, patch.clone()).map_err(|e| e.to_string())?;
                let mut mine = current[&id].clone();
                mine.attributes.extend(patch.clone());
                if mine != snapshot {
                    return Err(format!("patch snapshot of {id} differs"));
                }
                for (k, s) in subs.iter().enumerate() {
                    if s.fires(&mine, patch.keys()) {
                        expected[k].push(mine.clone());
                    }
                }
                current.insert(id, mine);
            }
            None => {
                let e = random_entity(&mut r);
                broker.upsert_entity(e.clone()).map_err(|e| e.to_string())?;
                for (k, s) in subs.iter().enumerate() {
                    if s.fires(&e, e.attributes.keys()) {
                        expected[k].push(e.clone());
                    }
                }
                current.insert(e.id.clone(), e);
            }
        }
        if r.random_bool(0.2) {
            broker.deliver_notifications();
        }
    }
    broker.deliver_notifications();
    let mut total = 0;
    for (k, s) in subs.iter().enumerate() {
        let got: Vec<NgsiEntity> = s
            .queue
            .drain()
            .into_iter()
            .map(|n| {
                assert_eq!(n.subscription_id, s.id);
                assert_eq!(n.data.len(), 1);
                n.data.into_iter().next().unwrap()
            })
            .collect();
        if got.len() != expected[k].len() {
            return Err(format!(
                "subscription {} got {} notifications, expected {}",
                s.id,
                got.len(),
                expected[k].len()
            ));
        }
        if got != expected[k] {
            return Err(format!("subscription {} notification content or order differs", s.id));
        }
        total += got.len();
    }
    Ok(total)
}

/// A writer commits while a dispatcher delivers; the main thread
/// unsubscribes mid-stream. Commits that began after the call returned must
/// never reach the sink. Returns (delivered, post-return commits).
pub fn unsubscribe_trial(seed: u64) -> Result<(usize, usize), String> {
    let mut r = rng(seed);
    let broker = Arc::new(Broker::new());
    let seen: Arc<Mutex<Vec<i64>>> = Arc::new(Mutex::new(Vec::new()));
    let sink_seen = Arc::clone(&seen);
    let sink = FnSink(move |n: &citykit::broker::Notification| {
        let mut s = sink_seen.lock().unwrap();
        for e in &n.data {
            s.push(e.attributes["seq"].as_f64().unwrap() as i64);
        }
        Ok(())
    });
    let sub = broker
        .subscribe(Subscription::new("Counter", NotificationTarget::sink(sink)))
        .map_err(|e| e.to_string())?;
    let dispatcher = broker.start_dispatcher(Duration::from_millis(1));
    let returned = Arc::new(AtomicBool::new(false));
    let post: Arc<Mutex<Vec<i64>>> = Arc::new(Mutex::new(Vec::new()));
    let writer = {
        let broker = Arc::clone(&broker);
        let returned = Arc::clone(&returned);
        let post = Arc::clone(&post);
        std::thread::spawn(move || {
            let mut after = 0;
            for seq in 0..100_000i64 {
                let began_after = returned.load(Ordering::SeqCst);
                if began_after {
                    post.lock().unwrap().push(seq);
                    after += 1;
                }
                let e = NgsiEntity::new(format!("c{}", seq % 7), "Counter").with("seq", Attribute::integer(seq));
                broker.upsert_entity(e).expect("upsert");
                if after >= 40 {
                    break;
                }
            }
        })
    };
    std::thread::sleep(Duration::from_micros(r.random_range(0..1500)));
    broker.unsubscribe(&sub).map_err(|e| e.to_string())?;
    returned.store(true, Ordering::SeqCst);
    writer.join().map_err(|_| "writer panicked".to_string())?;
    drop(dispatcher);
    let seen = seen.lock().unwrap().clone();
    let post = post.lock().unwrap().clone();
    let first_post = post.first().copied().unwrap_or(i64::MAX);
    if let Some(bad) = seen.iter().find(|s| **s >= first_post) {
        return Err(format!("seed {seed}: commit {bad} notified after unsubscribe returned"));
    }
    Ok((seen.len(), post.len()))
}

pub fn broker_semantics() -> Outcome {
    let mut results = Vec::new();
    let mut matched = 0usize;
    for seed in 0..1000 {
        match query_case(seed) {
            Ok(n) => matched += n,
            Err(e) => results.push(e),
        }
    }
    let query_ok = results.is_empty();
    let completeness = notification_completeness(7, 500);
    let mut unsub_failures = Vec::new();
    let mut delivered = 0;
    for seed in 0..100 {
        match unsubscribe_trial(seed) {
            Ok((d, _)) => delivered += d,
            Err(e) => unsub_failures.push(e),
        }
    }
    let passed = query_ok && completeness.is_ok() && unsub_failures.is_empty();
    let detail = format!(
        "query/scan {}/1000 stores ({} matches){}; completeness over 500 commits: {}; unsubscribe {}/100 clean ({} pre-return deliveries){}",
        1000 - results.len(),
        matched,
        results.first().map(|e| format!(" first mismatch: {e}")).unwrap_or_default(),
        match &completeness {
            Ok(n) => format!("{n} notifications, counts equal"),
            Err(e) => e.clone(),
        },
        100 - unsub_failures.len(),
        delivered,
        unsub_failures.first().map(|e| format!(" {e}")).unwrap_or_default(),
    );
    Outcome::new(passed, detail)
}

// ------------------------------------------------------------- validation

pub fn per_kind_counts(entities: Vec<NgsiEntity>) -> (BTreeMap<RuleKind, u64>, Vec<citykit::data_models::ValidationReport>) {
    let reg = SchemaRegistry::bundled();
    let mut reports = Vec::new();
    let summary = validate_batch(entities, &reg.snapshot(), |r| reports.push(r.clone()));
    (summary.per_kind_counts, reports)
}

/// Per-kind counts equal the plan, every seeded entity carries exactly its
/// seeded violation, and nothing else is flagged.
pub fn corpus_matches_plan(fx: &CityFixture) -> Result<u64, String> {
    let (corpus, truth) = generate_corpus(fx);
    if corpus.len() != fx.corpus_size.max(fx.defects.total()) {
        return Err(format!("corpus has {} entities", corpus.len()));
    }
    let (counts, reports) = per_kind_counts(corpus);
    for kind in RuleKind::ALL {
        let got = counts.get(&kind).copied().unwrap_or(0);
        let want = fx.defects.count(kind) as u64;
        if got != want {
            return Err(format!("{kind}: {got} violations, plan says {want}"));
        }
    }
    let by_index: BTreeMap<usize, _> = truth.iter().map(|d| (d.index, d)).collect();
    for (i, rep) in reports.iter().enumerate() {
        match by_index.get(&i) {
            None if !rep.violations.is_empty() => {
                return Err(format!("clean entity {} flagged: {:?}", rep.entity_id, rep.violations));
            }
            Some(d) => {
                if rep.violations.len() != 1 || rep.violations[0].rule_kind != d.rule_kind {
                    return Err(format!("{} expected one {}, got {:?}", d.entity_id, d.rule_kind, rep.violations));
                }
                if d.rule_kind != RuleKind::UnknownEntityType && rep.violations[0].attribute_name != d.attribute {
                    return Err(format!("{} flagged {} instead of {}", d.entity_id, rep.violations[0].attribute_name, d.attribute));
                }
            }
            None => {}
        }
    }
    Ok(counts.values().sum())
}

pub fn validation_soundness() -> Outcome {
    let fx = default_fixture();
    let seeded = corpus_matches_plan(&fx);
    let clean_fx = CityFixture {
        defects: DefectPlan::default(),
        ..fx.clone()
    };
    let (clean_counts, _) = per_kind_counts(generate_corpus(&clean_fx).0);
    let clean: u64 = clean_counts.values().sum();
    let passed = seeded.is_ok() && clean == 0 && fx.corpus_size == 200;
    Outcome::new(
        passed,
        format!(
            "seeded corpus of {}: {}; clean corpus: {clean} violations",
            fx.corpus_size,
            match &seeded {
                Ok(n) => format!("{n} violations, per-kind counts equal the plan"),
                Err(e) => e.clone(),
            }
        ),
    )
}

// ---------------------------------------------------------------- NGSI-LD

pub fn random_valid_entity(r: &mut ChaCha8Rng, i: usize) -> NgsiEntity {
    let ty = ["ParkingSpot", "Vehicle", "Road", "AirQualityObserved"][r.random_range(0..4)];
    let mut e = NgsiEntity::new(format!("e{i}-{}", r.random_range(0..1000)), ty);
    for k in 0..r.random_range(0..7) {
        let (name, attr) = match r.random_range(0..8) {
            0 => (format!("num{k}"), Attribute::number(r.random_range(-1e6..1e6))),
            1 => (format!("int{k}"), Attribute::integer(r.random_range(-1000..1000))),
            2 => (format!("txt{k}"), Attribute::text(WORDS[r.random_range(0..5)])),
            3 => (format!("flag{k}"), Attribute::new("Boolean", r.random_bool(0.5))),
            4 => (
                "location".to_string(),
                Attribute::new(
                    "geo:json",
                    json!({"type": "Point", "coordinates": [r.random_range(-180.0..180.0), r.random_range(-90.0..90.0)]}),
                ),
            ),
            5 => (
                format!("ref{}", ["Device", "Road", "ParkingSite"][r.random_range(0..3)]),
                Attribute::reference(format!("x{}", r.random_range(0..100))),
            ),
            6 => (
                format!("obj{k}"),
                Attribute::new("StructuredValue", json!({"a": [1, 2, r.random_range(0..9)], "b": null})),
            ),
            _ => (
                format!("seen{k}"),
                Attribute::date_time(citykit::ngsi::format_iso8601(r.random_range(0..2_000_000_000)))
                    .with_metadata("unit", "s"),
            ),
        };
        e = e.with(name, attr);
    }
    e
}

/// Reads (name, value) pairs back out of serialized NGSI-LD.
pub fn extract_ld(doc: &Value) -> Vec<(String, Value)> {
    let mut out = Vec::new();
    for (k, v) in doc.as_object().expect("object") {
        if matches!(k.as_str(), "id" | "type" | "@context") {
            continue;
        }
        let value = if v["type"] == "Relationship" {
            let target = k.strip_prefix("ref").expect("relationship named ref<Type>");
            let urn = v["object"].as_str().expect("object urn");
            let prefix = format!("urn:ngsi-ld:{target}:");
            Value::String(urn.strip_prefix(&prefix).expect("typed urn").to_string())
        } else {
            v["value"].clone()
        };
        out.push((k.clone(), value));
    }
    out.sort_by(|a, b| (&a.0, a.1.to_string()).cmp(&(&b.0, b.1.to_string())));
    out
}

pub fn ld_case(e: &NgsiEntity) -> Result<(), String> {
    let ld = ngsi_to_ngsild(e, "https://example.org/context.jsonld").map_err(|x| x.to_string())?;
    let doc = serde_json::to_value(&ld).map_err(|x| x.to_string())?;
    let want_id = format!("urn:ngsi-ld:{}:{}", e.entity_type, e.id);
    if doc["id"] != want_id.as_str() {
        return Err(format!("id {} is not {want_id}", doc["id"]));
    }
    let mut src: Vec<(String, Value)> = e.attributes.iter().map(|(k, a)| (k.clone(), a.value.clone())).collect();
    src.sort_by(|a, b| (&a.0, a.1.to_string()).cmp(&(&b.0, b.1.to_string())));
    if extract_ld(&doc) != src {
        return Err(format!("{}: extracted values differ", e.id));
    }
    Ok(())
}

pub fn ngsild_preservation() -> Outcome {
    let mut r = rng(2024);
    let mut failures = Vec::new();
    let mut pairs = 0;
    for i in 0..500 {
        let e = random_valid_entity(&mut r, i);
        assert!(e.validate().is_ok(), "generator produced an invalid entity");
        pairs += e.attributes.len();
        if let Err(x) = ld_case(&e) {
            failures.push(x);
        }
    }
    Outcome::new(
        failures.is_empty(),
        format!(
            "{}/500 entities preserved ({pairs} attribute pairs), ids are typed URNs{}",
            500 - failures.len(),
            failures.first().map(|f| format!("; {f}")).unwrap_or_default()
        ),
    )
}

// ------------------------------------------------------------------- GTFS

pub fn fixture_feeds() -> Vec<(String, GtfsFeed)> {
    let fx = default_fixture();
    let mut feeds = vec![("toy".to_string(), toy_feed(&fx))];
    for seed in 0..50 {
        feeds.push((format!("random-{seed}"), random_network(seed, RandomNetworkSpec::default(), &fx)));
    }
    feeds
}

pub fn gtfs_case(name: &str, feed: &GtfsFeed, seed: u64) -> Result<(), String> {
    let mut entities = feed_to_ngsi(feed);
    let (_, reference) = ngsi_to_gtfs(&entities).map_err(|e| format!("{name}: {e}"))?;
    let mut r = rng(seed);
    for _ in 0..5 {
        entities.shuffle(&mut r);
        let (_, bytes) = ngsi_to_gtfs(&entities).map_err(|e| format!("{name}: {e}"))?;
        if bytes != reference {
            return Err(format!("{name}: permuted entities changed the archive bytes"));
        }
    }
    let mut shuffled = feed.clone();
    shuffled.stops.shuffle(&mut r);
    shuffled.trips.shuffle(&mut r);
    shuffled.stop_times.shuffle(&mut r);
    shuffled.routes.shuffle(&mut r);
    shuffled.normalize();
    if write_feed_zip(&shuffled).map_err(|e| e.to_string())? != reference {
        return Err(format!("{name}: permuted tables changed the archive bytes"));
    }
    let mut normalized = feed.clone();
    normalized.normalize();
    let parsed = read_feed_zip(&reference).map_err(|e| format!("{name}: {e}"))?;
    if parsed != normalized {
        return Err(format!("{name}: parse(serialize(feed)) differs from the feed"));
    }
    Ok(())
}

pub fn gtfs_determinism() -> Outcome {
    let feeds = fixture_feeds();
    let failures: Vec<String> = feeds
        .iter()
        .enumerate()
        .filter_map(|(i, (n, f))| gtfs_case(n, f, i as u64).err())
        .collect();
    Outcome::new(
        failures.is_empty(),
        format!(
            "{}/{} fixtures byte-identical under permutation and round-trip exact{}",
            feeds.len() - failures.len(),
            feeds.len(),
            failures.first().map(|f| format!("; {f}")).unwrap_or_default()
        ),
    )
}

// ------------------------------------------------------------- estimator

pub fn estimator_defaults() -> Outcome {
    let mut fx = default_fixture();
    fx.parking.entities = 3;
    let clock = SimClock::new(fx.start_epoch());
    let est = Estimator::new(TrainingConfig::default(), Profile::parking(), Arc::new(clock.clone())).unwrap();
    let ids = series_entity_ids(&fx, "parking");
    let sizes = [999usize, 1000, 2000];
    let mut text = String::new();
    for (id, n) in ids.iter().zip(sizes) {
        for rec in historical_records(&fx, "parking", id, n, clock_now(&clock)) {
            text.push_str(&rec.to_string());
            text.push('\n');
        }
    }
    let report = est.ingest_historical_reader(text.as_bytes());
    est.start_schedule(clock_now(&clock));
    est.run_for(86_400, |t| clock.set(t));
    let mut problems = Vec::new();
    if report.appended != sizes.iter().sum::<usize>() {
        problems.push(format!("ingested {}", report.appended));
    }
    let mut rows = Vec::new();
    for (id, n) in ids.iter().zip(sizes) {
        let key = est.key(id);
        let s = est.series_stats(&key);
        let has_model = est.model(&key).is_some();
        rows.push(format!("{n}: model={has_model} retrains={} inferences={}", s.trained, s.inferences));
        let (want_model, want_infer) = if n < 1000 { (false, 0) } else { (true, 96) };
        if has_model != want_model || s.inferences != want_infer || s.train_invocations != 1 {
            problems.push(format!("{id} ({n} samples): {s:?}"));
        }
        if want_model && s.trained != 1 {
            problems.push(format!("{id}: {} retrains", s.trained));
        }
    }
    Outcome::new(
        problems.is_empty(),
        format!("{}{}", rows.join(", "), if problems.is_empty() { String::new() } else { format!("; {}", problems.join("; ")) }),
    )
}

fn clock_now(c: &SimClock) -> i64 {
    use citykit::Clock;
    c.now()
}

/// ‖(AᵀA+λI)β − Aᵀy‖ / ‖Aᵀy‖ computed with plain loops.
pub fn normal_residual(rows: &[Vec<f64>], y: &[f64], lambda: f64, beta: &[f64]) -> f64 {
    let p = beta.len();
    let mut aty = vec![0.0; p];
    let mut lhs = vec![0.0; p];
    for (row, yi) in rows.iter().zip(y) {
        let fitted: f64 = row.iter().zip(beta).map(|(a, b)| a * b).sum();
        for j in 0..p {
            aty[j] += row[j] * yi;
            lhs[j] += row[j] * fitted;
        }
    }
    let mut num = 0.0;
    let mut den = 0.0;
    for j in 0..p {
        let r = lhs[j] + lambda * beta[j] - aty[j];
        num += r * r;
        den += aty[j] * aty[j];
    }
    num.sqrt() / den.sqrt()
}

/// One seeded problem: a noisy stationary AR series of random order.
pub fn ridge_problem(seed: u64) -> (Vec<f64>, usize, f64) {
    let mut r = rng(seed ^ 0xABCD);
    let lags = r.random_range(1..=8);
    let n = r.random_range((lags + 20)..=2000);
    let lambda = 10f64.powf(r.random_range(-6.0..1.0));
    let phi: Vec<f64> = (0..lags).map(|_| r.random_range(-0.9..0.9) / lags as f64).collect();
    let mut values: Vec<f64> = Vec::with_capacity(n);
    for t in 0..n {
        let ar: f64 = (0..lags.min(t)).map(|j| phi[j] * values[t - 1 - j]).sum();
        values.push(10.0 + ar + 5.0 * r.random_range(-1.0..1.0));
    }
    (values, lags, lambda)
}

pub fn ridge_case(seed: u64) -> Result<f64, String> {
    let (values, lags, lambda) = ridge_problem(seed);
    let n = values.len();
    let rows: Vec<Vec<f64>> = (lags..n)
        .map(|i| std::iter::once(1.0).chain((1..=lags).map(|j| values[i - j])).collect())
        .collect();
    let (a, y) = lag_matrix(&values, lags, lags..n);
    let beta = fit_ridge(&a, &y, lambda).map_err(|e| format!("seed {seed}: {e}"))?;
    let res = normal_residual(&rows, &values[lags..], lambda, beta.as_slice());
    if res <= 1e-8 {
        Ok(res)
    } else {
        Err(format!("seed {seed}: residual {res:e}"))
    }
}

pub fn ridge_correctness() -> Outcome {
    let mut worst: f64 = 0.0;
    let mut failures = Vec::new();
    for seed in 0..100 {
        match ridge_case(seed) {
            Ok(r) => worst = worst.max(r),
            Err(e) => failures.push(e),
        }
    }
    Outcome::new(
        failures.is_empty(),
        format!(
            "{}/100 problems within 1e-8, worst residual {worst:.2e}{}",
            100 - failures.len(),
            failures.first().map(|f| format!("; {f}")).unwrap_or_default()
        ),
    )
}

/// Noise-free y_t = 0.5 y_{t-1} + 3 from `y0`, fitted by unpenalized
/// least squares through the training path.
pub fn ar_fit(y0: f64, n: usize) -> Result<(f64, f64), String> {
    let mut v = y0;
    let samples: Vec<Sample> = (0..n)
        .map(|i| {
            let s = Sample { t: i as i64 * 900, value: v };
            v = 0.5 * v + 3.0;
            s
        })
        .collect();
    let cfg = TrainingConfig {
        algorithm: Algorithm::Autoregressive { lags: 1, ridge_lambda: 0.0 },
        min_samples: n,
        ..TrainingConfig::default()
    };
    let m = train(&SeriesKey::new("ar", "value"), &samples, n, &cfg, 0)
        .map_err(|e| e.to_string())?
        .ok_or("below minSamples")?;
    Ok((m.coefficients[0], m.coefficients[1]))
}

pub fn ar_recovery() -> Outcome {
    match ar_fit(100.0, 2000) {
        Ok((c, phi)) => {
            let err = (c - 3.0).abs().max((phi - 0.5).abs());
            Outcome::new(err <= 1e-8, format!("fitted ({c:.12}, {phi:.12}), max error {err:.2e}"))
        }
        Err(e) => Outcome::new(false, e),
    }
}

// ---------------------------------------------------------------- routing

pub mod brute {
    //! Earliest arrival computed from the raw feed: trip instances on the
    //! service days around the query, realtime applied with downstream
    //! propagation, and rides joined by zero-minimum transfers or single
    //! footpaths between stops.

    use super::*;

    const EARTH_M: f64 = 6_371_000.0;
    const WALK_MPS: f64 = 1.3;
    const FOOTPATH_M: f64 = 400.0;

    fn meters(a: (f64, f64), b: (f64, f64)) -> f64 {
        let (la1, la2) = (a.0.to_radians(), b.0.to_radians());
        let dla = la2 - la1;
        let dlo = (b.1 - a.1).to_radians();
        let h = (dla / 2.0).sin().powi(2) + la1.cos() * la2.cos() * (dlo / 2.0).sin().powi(2);
        2.0 * EARTH_M * h.sqrt().min(1.0).asin()
    }

    fn walk_secs(m: f64) -> i64 {
        ((m / WALK_MPS) - 1e-6).ceil().max(0.0) as i64
    }

    struct Inst {
        stops: Vec<usize>,
        arr: Vec<i64>,
        dep: Vec<i64>,
    }

    fn days_around(t: i64) -> Vec<NaiveDate> {
        let d = DateTime::from_timestamp(t, 0).unwrap().date_naive();
        vec![d.checked_sub_days(Days::new(1)).unwrap(), d, d.checked_add_days(Days::new(1)).unwrap()]
    }

    fn midnight(d: NaiveDate) -> i64 {
        d.and_hms_opt(0, 0, 0).unwrap().and_utc().timestamp()
    }

    fn instances(feed: &GtfsFeed, rt: Option<&GtfsRtFeed>, t0: i64, stop_ix: &BTreeMap<&str, usize>) -> Vec<Inst> {
        let mut out = Vec::new();
        for trip in &feed.trips {
            let svc = feed.services.iter().find(|s| s.service_id == trip.service_id).unwrap();
            let mut calls: Vec<_> = feed.stop_times.iter().filter(|st| st.trip_id == trip.trip_id).collect();
            calls.sort_by_key(|c| c.stop_sequence);
            if calls.len() < 2 {
                continue;
            }
            let active: Vec<i64> = days_around(t0)
                .into_iter()
                .filter(|d| {
                    *d >= svc.start_date && *d <= svc.end_date && svc.weekdays[d.weekday().num_days_from_monday() as usize]
                })
                .map(midnight)
                .collect();
            // realtime deltas per (midnight, call index)
            let mut deltas: BTreeMap<i64, BTreeMap<usize, i64>> = BTreeMap::new();
            if let Some(rt) = rt {
                for tu in rt.trip_updates.iter().filter(|u| u.trip_id == trip.trip_id) {
                    for u in &tu.stop_time_updates {
                        let Some(ci) = calls.iter().position(|c| Some(c.stop_sequence) == u.stop_sequence) else {
                            continue;
                        };
                        let sched = i64::from(calls[ci].arrival);
                        let anchor = u.arrival_override.unwrap_or(rt.header_timestamp);
                        let Some(&m) = active.iter().min_by_key(|m| (*m + sched - anchor).abs()) else {
                            continue;
                        };
                        let delta = match (u.arrival_override, u.delay_seconds) {
                            (Some(a), _) => a - (m + sched),
                            (None, Some(d)) => d,
                            _ => continue,
                        };
                        deltas.entry(m).or_default().insert(ci, delta);
                    }
                }
            }
            for m in active {
                let ups = deltas.get(&m);
                let (mut arr, mut dep) = (Vec::new(), Vec::new());
                let mut delta = 0;
                for (ci, c) in calls.iter().enumerate() {
                    if let Some(d) = ups.and_then(|u| u.get(&ci)) {
                        delta = *d;
                    }
                    let floor = dep.last().copied().unwrap_or(i64::MIN);
                    let a = (m + i64::from(c.arrival) + delta).max(floor);
                    let d = (m + i64::from(c.departure) + delta).max(a);
                    arr.push(a);
                    dep.push(d);
                }
                out.push(Inst {
                    stops: calls.iter().map(|c| stop_ix[c.stop_id.as_str()]).collect(),
                    arr,
                    dep,
                });
            }
        }
        out
    }

    fn relax(slot: &mut Option<i64>, t: i64) {
        if slot.is_none_or(|x| t < x) {
            *slot = Some(t);
        }
    }

    /// Round-based dynamic program over (rides, stop) with separate labels for
    /// "arrived by ride" and "arrived by walk", so walks never chain.
    pub fn earliest(
        feed: &GtfsFeed,
        rt: Option<&GtfsRtFeed>,
        from: &str,
        to: &str,
        t0: i64,
        max_transfers: u32,
        max_walk: f64,
    ) -> Option<i64> {
        let stop_ix: BTreeMap<&str, usize> = feed.stops.iter().enumerate().map(|(i, s)| (s.stop_id.as_str(), i)).collect();
        let coords: Vec<(f64, f64)> = feed.stops.iter().map(|s| (s.lat, s.lon)).collect();
        let n = coords.len();
        let (o, d) = (stop_ix[from], stop_ix[to]);
        let insts = instances(feed, rt, t0, &stop_ix);
        let k_max = max_transfers as usize + 1;
        let limit = FOOTPATH_M.min(max_walk);
        let mut ride = vec![vec![None; n]; k_max + 1];
        let mut walk = vec![vec![None; n]; k_max + 1];
        ride[0][o] = Some(t0);
        for k in 0..=k_max {
            for s in 0..n {
                let Some(t) = ride[k][s] else { continue };
                for s2 in 0..n {
                    let m = meters(coords[s], coords[s2]);
                    if s2 != s && m <= limit {
                        relax(&mut walk[k][s2], t + walk_secs(m));
                    }
                }
            }
            if k == k_max {
                break;
            }
            for inst in &insts {
                for ci in 0..inst.stops.len() - 1 {
                    let s = inst.stops[ci];
                    let ready = match (ride[k][s], walk[k][s]) {
                        (Some(a), Some(b)) => Some(a.min(b)),
                        (a, b) => a.or(b),
                    };
                    if ready.is_none_or(|t| t > inst.dep[ci]) {
                        continue;
                    }
                    for cj in ci + 1..inst.stops.len() {
                        relax(&mut ride[k + 1][inst.stops[cj]], inst.arr[cj]);
                    }
                }
            }
        }
        (0..=k_max).filter_map(|k| match (ride[k][d], walk[k][d]) {
            (Some(a), Some(b)) => Some(a.min(b)),
            (a, b) => a.or(b),
        }).min()
    }
}

pub struct RoutingCase {
    pub seed: u64,
    pub static_ok: bool,
    pub realtime_ok: bool,
    pub reachable: bool,
    pub detail: String,
}

pub fn routing_case(seed: u64, fx: &CityFixture) -> RoutingCase {
    let feed = random_network(seed, RandomNetworkSpec::default(), fx);
    let midnight = fx.service_day_midnight();
    let mut r = rng(seed.wrapping_mul(0x9E37_79B9));
    let n = feed.stops.len();
    let o = r.random_range(0..n);
    let d = (o + r.random_range(1..n)) % n;
    let (from, to) = (feed.stops[o].stop_id.clone(), feed.stops[d].stop_id.clone());
    let t0 = midnight + r.random_range(6 * 3600 + 1800..9 * 3600);
    let k = r.random_range(0..=3u32);
    let req = PlanRequest::between_stops(&from, &to, t0).max_transfers(k);
    let router = Router::from_feed(feed.clone(), GraphParams::default()).expect("valid random feed");
    let first = |router: &Router| router.plan(&req).ok().and_then(|p| p.itineraries.first().map(|i| i.arrival));
    let want_static = brute::earliest(&feed, None, &from, &to, t0, k, req.max_walk_meters);
    let got_static = first(&router);
    let rt = random_realtime(seed, &feed, midnight);
    router.apply_realtime(rt.clone());
    let want_rt = brute::earliest(&feed, Some(&rt), &from, &to, t0, k, req.max_walk_meters);
    let got_rt = first(&router);
    RoutingCase {
        seed,
        static_ok: got_static == want_static,
        realtime_ok: got_rt == want_rt,
        reachable: want_static.is_some(),
        detail: format!(
            "seed {seed} {from}->{to} k={k}: static {got_static:?} vs {want_static:?}, realtime {got_rt:?} vs {want_rt:?}"
        ),
    }
}

pub fn routing_optimality() -> Outcome {
    let fx = default_fixture();
    let cases: Vec<RoutingCase> = (0..200).map(|s| routing_case(s, &fx)).collect();
    let s_ok = cases.iter().filter(|c| c.static_ok).count();
    let r_ok = cases.iter().filter(|c| c.realtime_ok).count();
    let reachable = cases.iter().filter(|c| c.reachable).count();
    let bad = cases.iter().find(|c| !(c.static_ok && c.realtime_ok));
    Outcome::new(
        s_ok == 200 && r_ok == 200,
        format!(
            "static {s_ok}/200, with overlays {r_ok}/200 ({reachable} reachable){}",
            bad.map(|c| format!("; {}", c.detail)).unwrap_or_default()
        ),
    )
}

// --------------------------------------------------------------- pipeline

pub fn pipeline_end_to_end() -> Outcome {
    let cfg = RoutingScenarioConfig {
        fixture: default_fixture(),
        ..Default::default()
    };
    let report = run_scenario_routing(&cfg);
    let passed_stages = report.stages.iter().filter(|s| s.status == citykit::harness::StageStatus::Pass).count();
    let detail = |name: &str| report.stage(name).map(|s| s.detail.clone()).unwrap_or_default();
    Outcome::new(
        report.passed,
        format!(
            "{passed_stages}/{} stages pass; gtfsrt-estimation: {}; replan-realtime: {}",
            report.stages.len(),
            detail("gtfsrt-estimation"),
            detail("replan-realtime")
        ),
    )
}

/// Wall-clock helper.
pub fn timed<T>(f: impl FnOnce() -> T) -> (T, Duration) {
    let start = Instant::now();
    let out = f();
    (out, start.elapsed())
}
