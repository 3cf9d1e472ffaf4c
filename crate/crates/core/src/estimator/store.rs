use std::collections::BTreeMap;
use std::fmt;
use std::sync::RwLock;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub t: i64,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct SeriesKey {
    pub entity_id: String,
    pub attribute: String,
}

impl SeriesKey {
    pub fn new(entity_id: impl Into<String>, attribute: impl Into<String>) -> Self {
        Self {
            entity_id: entity_id.into(),
            attribute: attribute.into(),
        }
    }

    pub fn predicted(&self) -> Self {
        Self::new(self.entity_id.clone(), format!("{}.predicted", self.attribute))
    }
}

impl fmt::Display for SeriesKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.entity_id, self.attribute)
    }
}

/// Embedded time-series store: per key, samples strictly increasing in `t`.
#[derive(Debug, Default)]
pub struct TimeSeriesStore {
    series: RwLock<BTreeMap<SeriesKey, Vec<Sample>>>,
}

fn insert_sorted(v: &mut Vec<Sample>, s: Sample) {
    match v.last() {
        Some(last) if last.t < s.t => v.push(s),
        None => v.push(s),
        _ => match v.binary_search_by_key(&s.t, |x| x.t) {
            Ok(i) => v[i] = s,
            Err(i) => v.insert(i, s),
        },
    }
}

impl TimeSeriesStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends one sample; a duplicate timestamp replaces the stored value.
    pub fn append(&self, key: &SeriesKey, sample: Sample) {
        let mut map = self.series.write().unwrap();
        insert_sorted(map.entry(key.clone()).or_default(), sample);
    }

    pub fn append_many(&self, key: &SeriesKey, samples: impl IntoIterator<Item = Sample>) {
        let mut map = self.series.write().unwrap();
        let v = map.entry(key.clone()).or_default();
        for s in samples {
            insert_sorted(v, s);
        }
    }

    pub fn len_of(&self, key: &SeriesKey) -> usize {
        self.series.read().unwrap().get(key).map_or(0, Vec::len)
    }

    pub fn contains(&self, key: &SeriesKey) -> bool {
        self.series.read().unwrap().contains_key(key)
    }

    pub fn keys(&self) -> Vec<SeriesKey> {
        self.series.read().unwrap().keys().cloned().collect()
    }

    /// Copy of the `n` most recent samples.
    pub fn window(&self, key: &SeriesKey, n: usize) -> Vec<Sample> {
        self.series
            .read()
            .unwrap()
            .get(key)
            .map(|v| v[v.len().saturating_sub(n)..].to_vec())
            .unwrap_or_default()
    }

    /// Samples with `from <= t <= to`; `None` for an unknown key.
    pub fn range(&self, key: &SeriesKey, from: Option<i64>, to: Option<i64>) -> Option<Vec<Sample>> {
        let map = self.series.read().unwrap();
        let v = map.get(key)?;
        Some(
            v.iter()
                .filter(|s| from.is_none_or(|f| s.t >= f) && to.is_none_or(|x| s.t <= x))
                .copied()
                .collect(),
        )
    }
}
