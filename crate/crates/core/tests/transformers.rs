mod common;

use proptest::prelude::*;
use serde_json::{json, Value};

use citykit::transformers::{json_to_ngsi, ngsi_to_ngsild, MappingRuleSet, RecordErrorKind};
use citykit::{Attribute, NgsiEntity};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn ngsild_preserves_values(seed in any::<u64>()) {
        let mut r = common::rng(seed);
        let e = common::random_valid_entity(&mut r, (seed % 1000) as usize);
        common::ld_case(&e).map_err(TestCaseError::fail)?;
    }

    /// Every record yields either one entity or one error, in input order,
    /// and mapped values equal the source under the declared transform.
    #[test]
    fn mapping_is_total_and_faithful(
        records in prop::collection::vec(
            (prop::option::of("[a-z]{1,6}"), prop::option::of(-1000i64..1000), prop::option::of(0u32..100)),
            0..30,
        )
    ) {
        let rules = MappingRuleSet::from_json(r#"{
            "entityTypeTemplate": "OnStreetParking",
            "idTemplate": "lot:{sensor}",
            "attributeMappings": [
                {"sourcePath": "free", "targetAttribute": "availableSpotNumber", "valueType": "Number"},
                {"sourcePath": "occ", "targetAttribute": "occupancy", "valueType": "Number", "transform": {"scale": 0.01}}
            ]
        }"#).unwrap();
        let doc = Value::Array(records.iter().map(|(s, f, o)| {
            let mut m = serde_json::Map::new();
            if let Some(s) = s { m.insert("sensor".into(), json!(s)); }
            if let Some(f) = f { m.insert("free".into(), json!(f)); }
            if let Some(o) = o { m.insert("occ".into(), json!(o)); }
            Value::Object(m)
        }).collect());
        let out = json_to_ngsi(&doc, &rules).unwrap();
        prop_assert_eq!(out.entities.len() + out.errors.len(), records.len());
        let mut entities = out.entities.iter();
        for (i, (s, f, o)) in records.iter().enumerate() {
            match s {
                None => {
                    let err = out.errors.iter().find(|e| e.index == i).unwrap();
                    prop_assert_eq!(err.kind, RecordErrorKind::IdUnresolvable);
                }
                Some(s) => {
                    let e = entities.next().unwrap();
                    prop_assert_eq!(&e.id, &format!("lot:{s}"));
                    prop_assert_eq!(e.attr("availableSpotNumber").and_then(Attribute::as_f64), f.map(|x| x as f64));
                    prop_assert_eq!(e.attr("occupancy").and_then(Attribute::as_f64), o.map(|x| f64::from(x) * 0.01));
                }
            }
        }
    }
}

#[test]
fn urn_ids_and_references_pass_through() {
    let e = NgsiEntity::new("urn:ngsi-ld:Vehicle:v1", "Vehicle")
        .with("refRoad", Attribute::reference("urn:ngsi-ld:Road:r9"))
        .with("speed", Attribute::number(12.5));
    let ld = serde_json::to_value(ngsi_to_ngsild(&e, "https://example.org/ctx.jsonld").unwrap()).unwrap();
    assert_eq!(ld["id"], "urn:ngsi-ld:Vehicle:v1");
    assert_eq!(ld["refRoad"], json!({"type": "Relationship", "object": "urn:ngsi-ld:Road:r9"}));
    assert_eq!(ld["speed"], json!({"type": "Property", "value": 12.5}));
    assert_eq!(ld["@context"], json!(["https://example.org/ctx.jsonld"]));
}
