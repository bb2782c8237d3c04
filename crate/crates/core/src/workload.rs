//! Request arrival generation: per-slot demand tensors, frame averages,
//! CSV trace replay and synthetic catalogs.
//!
//! Noise is drawn from a generator seeded by hashing the coordinates
//! `(seed, slot, p, l, i)`, so any slot can be regenerated in isolation and
//! in any order.

use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{
    validate_catalog, CatalogError, DemandKey, DemandScope, DemandTensor, ServiceClass,
    SlaCatalog,
};
use crate::topology::ClusterGraph;

pub const TRACE_HEADER: [&str; 5] = ["slot", "node", "sla", "service", "count"];

#[derive(Debug, Error)]
pub enum WorkloadError {
    #[error("frame has no slots")]
    EmptyFrame,
    #[error("frame_average expects slot-scoped tensors")]
    WrongScope,
    #[error("trace row {row}: {reason}")]
    SchemaError { row: usize, reason: String },
    #[error("trace row {row}: unknown {what} {id}")]
    UnknownId {
        row: usize,
        what: &'static str,
        id: u32,
    },
    #[error("invalid rate pattern: {0}")]
    InvalidPattern(String),
    #[error("reading trace: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Catalog(#[from] CatalogError),
}

/// Time profile applied to the base rates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RateShape {
    Constant,
    /// `base * (1 + amplitude * sin(2π slot / period))`; `amplitude` is a
    /// fraction of each key's base rate in `[0, 1]`.
    Sinusoid { period: u32, amplitude: f64 },
    /// Replays recorded counts; slot `t` reads row `t mod len`.
    Trace {
        #[serde(with = "slots_serde")]
        slots: Vec<BTreeMap<DemandKey, f64>>,
    },
}

/// Arrival process for every (service, node) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatePattern {
    #[serde(with = "rates_serde")]
    pub base_rates: BTreeMap<DemandKey, f64>,
    pub shape: RateShape,
    pub noise_std: f64,
    pub seed: u64,
}

impl RatePattern {
    pub fn constant(base_rates: BTreeMap<DemandKey, f64>) -> Self {
        Self {
            base_rates,
            shape: RateShape::Constant,
            noise_std: 0.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), WorkloadError> {
        let bad = |m: &str| Err(WorkloadError::InvalidPattern(m.to_string()));
        if !(self.noise_std.is_finite() && self.noise_std >= 0.0) {
            return bad("noise_std must be finite and >= 0");
        }
        if self
            .base_rates
            .values()
            .any(|v| !(v.is_finite() && *v >= 0.0))
        {
            return bad("base rates must be finite and >= 0");
        }
        match &self.shape {
            RateShape::Constant => {}
            RateShape::Sinusoid { period, amplitude } => {
                if *period < 2 {
                    return bad("sinusoid period must be >= 2 slots");
                }
                if !(0.0..=1.0).contains(amplitude) {
                    return bad("sinusoid amplitude must be a fraction in [0, 1]");
                }
            }
            RateShape::Trace { slots } => {
                if slots.is_empty() {
                    return bad("trace has no slots");
                }
            }
        }
        Ok(())
    }

    /// All keys this pattern can emit.
    pub fn keys(&self) -> BTreeSet<DemandKey> {
        match &self.shape {
            RateShape::Trace { slots } => slots.iter().flat_map(|s| s.keys().copied()).collect(),
            _ => self.base_rates.keys().copied().collect(),
        }
    }

    fn shaped_rate(&self, key: &DemandKey, slot: u64) -> f64 {
        match &self.shape {
            RateShape::Constant => self.base_rates.get(key).copied().unwrap_or(0.0),
            RateShape::Sinusoid { period, amplitude } => {
                let base = self.base_rates.get(key).copied().unwrap_or(0.0);
                let phase = 2.0 * PI * (slot % *period as u64) as f64 / *period as f64;
                base * (1.0 + amplitude * phase.sin())
            }
            RateShape::Trace { slots } => {
                let row = &slots[(slot % slots.len() as u64) as usize];
                row.get(key).copied().unwrap_or(0.0)
            }
        }
    }
}

/// λ^t for one slot.
pub fn slot_arrivals(pattern: &RatePattern, slot: u64) -> DemandTensor {
    let mut counts = BTreeMap::new();
    for key in pattern.keys() {
        let mut rate = pattern.shaped_rate(&key, slot);
        if pattern.noise_std > 0.0 {
            let mut rng = ChaCha8Rng::seed_from_u64(coordinate_seed(pattern.seed, slot, &key));
            let normal = Normal::new(0.0, pattern.noise_std).expect("validated noise_std");
            rate += normal.sample(&mut rng);
        }
        counts.insert(key, rate.max(0.0));
    }
    DemandTensor::from_counts(counts, DemandScope::Slot).expect("rates clamped at zero")
}

/// The frame-level demand λ^τ: entrywise mean of the frame's slot tensors.
pub fn frame_average(slots: &[DemandTensor]) -> Result<DemandTensor, WorkloadError> {
    if slots.is_empty() {
        return Err(WorkloadError::EmptyFrame);
    }
    if slots.iter().any(|s| s.scope() != DemandScope::Slot) {
        return Err(WorkloadError::WrongScope);
    }
    let mut sums: BTreeMap<DemandKey, f64> = BTreeMap::new();
    for s in slots {
        for (k, v) in s.iter() {
            *sums.entry(*k).or_insert(0.0) += v;
        }
    }
    let n = slots.len() as f64;
    for v in sums.values_mut() {
        *v /= n;
    }
    Ok(DemandTensor::from_counts(sums, DemandScope::Slot)
        .expect("mean of non-negative values")
        .with_scope(DemandScope::FrameAverage))
}

/// Mean demand implied by the pattern's base rates (slot-independent view).
pub fn base_rate_tensor(pattern: &RatePattern) -> DemandTensor {
    let counts = match &pattern.shape {
        RateShape::Trace { slots } => {
            let mut sums: BTreeMap<DemandKey, f64> = BTreeMap::new();
            for row in slots {
                for (k, v) in row {
                    *sums.entry(*k).or_insert(0.0) += v;
                }
            }
            let n = slots.len() as f64;
            sums.into_iter().map(|(k, v)| (k, v / n)).collect()
        }
        _ => pattern.base_rates.clone(),
    };
    DemandTensor::from_counts(counts, DemandScope::FrameAverage).expect("validated rates")
}

/// Independent sub-seed for stream `tag` of a master seed.
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    splitmix64(splitmix64(seed) ^ tag)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn coordinate_seed(seed: u64, slot: u64, key: &DemandKey) -> u64 {
    let mut h = splitmix64(seed);
    for part in [
        slot,
        key.service.sla_level as u64,
        key.service.service_id as u64,
        key.node as u64,
    ] {
        h = splitmix64(h ^ part);
    }
    h
}

#[derive(Debug, Deserialize)]
struct TraceRow {
    slot: i64,
    node: i64,
    sla: i64,
    service: i64,
    count: f64,
}

/// Loads a `slot,node,sla,service,count` CSV trace. Slots must cover
/// `0..=max` without gaps; ids must exist in the catalog and graph.
pub fn load_trace(
    path: &Path,
    catalog: &SlaCatalog,
    graph: &ClusterGraph,
) -> Result<RatePattern, WorkloadError> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_path(path)
        .map_err(|e| csv_error(0, e))?;
    let header = reader.headers().map_err(|e| csv_error(0, e))?.clone();
    if header.iter().collect::<Vec<_>>() != TRACE_HEADER {
        return Err(WorkloadError::SchemaError {
            row: 0,
            reason: format!("header must be `{}`", TRACE_HEADER.join(",")),
        });
    }

    let mut by_slot: BTreeMap<u64, BTreeMap<DemandKey, f64>> = BTreeMap::new();
    for (k, rec) in reader.deserialize::<TraceRow>().enumerate() {
        let row = k + 1;
        let rec = rec.map_err(|e| csv_error(row, e))?;
        let schema = |reason: &str| WorkloadError::SchemaError {
            row,
            reason: reason.to_string(),
        };
        if rec.slot < 0 {
            return Err(schema("slot must be >= 0"));
        }
        if !(rec.count.is_finite() && rec.count >= 0.0) {
            return Err(schema("count must be finite and >= 0"));
        }
        let as_id = |v: i64, what: &'static str| {
            u32::try_from(v).map_err(|_| WorkloadError::SchemaError {
                row,
                reason: format!("{what} id out of range"),
            })
        };
        let (node, sla, service) = (
            as_id(rec.node, "node")?,
            as_id(rec.sla, "sla")?,
            as_id(rec.service, "service")?,
        );
        if !graph.contains(node) {
            return Err(WorkloadError::UnknownId {
                row,
                what: "node",
                id: node,
            });
        }
        let key = DemandKey::new(sla, service, node);
        if catalog.get(key.service).is_none() {
            return Err(WorkloadError::UnknownId {
                row,
                what: "service",
                id: service,
            });
        }
        let slot_map = by_slot.entry(rec.slot as u64).or_default();
        if slot_map.insert(key, rec.count).is_some() {
            return Err(schema("duplicate (slot, node, sla, service)"));
        }
    }
    if by_slot.is_empty() {
        return Err(WorkloadError::SchemaError {
            row: 0,
            reason: "trace has no rows".into(),
        });
    }
    for (expected, slot) in by_slot.keys().enumerate() {
        if *slot != expected as u64 {
            return Err(WorkloadError::SchemaError {
                row: 0,
                reason: format!("slots must be contiguous from 0; missing slot {expected}"),
            });
        }
    }
    Ok(RatePattern {
        base_rates: BTreeMap::new(),
        shape: RateShape::Trace {
            slots: by_slot.into_values().collect(),
        },
        noise_std: 0.0,
        seed: 0,
    })
}

fn csv_error(row: usize, e: csv::Error) -> WorkloadError {
    WorkloadError::SchemaError {
        row,
        reason: e.to_string(),
    }
}

/// Writes a pattern's first `slots` slots in the trace CSV format.
pub fn write_trace(
    path: &Path,
    pattern: &RatePattern,
    slots: u64,
) -> Result<(), WorkloadError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(0, e))?;
    w.write_record(TRACE_HEADER).map_err(|e| csv_error(0, e))?;
    for t in 0..slots {
        for (k, v) in slot_arrivals(pattern, t).iter() {
            w.write_record([
                t.to_string(),
                k.node.to_string(),
                k.service.sla_level.to_string(),
                k.service.service_id.to_string(),
                v.to_string(),
            ])
            .map_err(|e| csv_error(0, e))?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Ranges for synthetic catalogs, loosely following cluster-trace
/// magnitudes and telecom latency classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticCatalog {
    pub levels: u32,
    pub services_per_level: (u32, u32),
    pub packet_mb: (f64, f64),
    pub memory_mb: (f64, f64),
    pub compute_vcpu: (f64, f64),
    /// Lifecycle of level 1; each further level adds `lifecycle_step_ms`.
    pub lifecycle_ms: (f64, f64),
    pub lifecycle_step_ms: f64,
    pub exec_ms: (f64, f64),
    pub seed: u64,
}

impl Default for SyntheticCatalog {
    fn default() -> Self {
        Self {
            levels: 6,
            services_per_level: (2, 4),
            packet_mb: (0.1, 0.8),
            memory_mb: (60.0, 220.0),
            compute_vcpu: (0.02, 0.08),
            lifecycle_ms: (14.0, 24.0),
            lifecycle_step_ms: 15.0,
            exec_ms: (1.0, 4.0),
            seed: 0,
        }
    }
}

impl SyntheticCatalog {
    pub fn generate(&self) -> Result<SlaCatalog, WorkloadError> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0xCA7A_1065);
        let mut services = Vec::new();
        for p in 1..=self.levels {
            let count = rng.gen_range(self.services_per_level.0..=self.services_per_level.1);
            for l in 1..=count {
                let step = self.lifecycle_step_ms * (p - 1) as f64;
                services.push(ServiceClass {
                    sla_level: p,
                    service_id: l,
                    packet_size_h: uniform(&mut rng, self.packet_mb),
                    memory_r: uniform(&mut rng, self.memory_mb),
                    compute_w: uniform(&mut rng, self.compute_vcpu),
                    max_response_t: uniform(&mut rng, self.lifecycle_ms) + step,
                    exec_time_o: uniform(&mut rng, self.exec_ms),
                });
            }
        }
        Ok(validate_catalog(SlaCatalog {
            services,
            channel_count_p: self.levels,
        })?)
    }
}

/// Base rates drawn uniformly per (service, node).
pub fn synthetic_base_rates(
    catalog: &SlaCatalog,
    graph: &ClusterGraph,
    range: (f64, f64),
    seed: u64,
) -> BTreeMap<DemandKey, f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x1A3B_DA7E);
    let mut out = BTreeMap::new();
    for s in &catalog.services {
        for node in graph.node_ids() {
            out.insert(
                DemandKey {
                    service: s.key(),
                    node,
                },
                uniform(&mut rng, range),
            );
        }
    }
    out
}

fn uniform(rng: &mut impl Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo >= hi {
        lo
    } else {
        rng.gen_range(lo..hi)
    }
}

mod rates_serde {
    use super::*;
    use serde::{Deserializer, Serializer};

    #[derive(Serialize, Deserialize)]
    struct Entry {
        sla: u32,
        service: u32,
        node: u32,
        rate: f64,
    }

    pub fn serialize<S: Serializer>(m: &BTreeMap<DemandKey, f64>, s: S) -> Result<S::Ok, S::Error> {
        let v: Vec<Entry> = m
            .iter()
            .map(|(k, r)| Entry {
                sla: k.service.sla_level,
                service: k.service.service_id,
                node: k.node,
                rate: *r,
            })
            .collect();
        v.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(
        d: D,
    ) -> Result<BTreeMap<DemandKey, f64>, D::Error> {
        let v = Vec::<Entry>::deserialize(d)?;
        Ok(v
            .into_iter()
            .map(|e| (DemandKey::new(e.sla, e.service, e.node), e.rate))
            .collect())
    }

    pub(super) fn to_entries(m: &BTreeMap<DemandKey, f64>) -> serde_json::Value {
        serialize(m, serde_json::value::Serializer).expect("plain data")
    }

    pub(super) fn from_entries(v: serde_json::Value) -> Result<BTreeMap<DemandKey, f64>, serde_json::Error> {
        deserialize(v)
    }
}

mod slots_serde {
    use super::*;
    use serde::de::Error as _;
    use serde::ser::Error as _;
    use serde::{Deserializer, Serializer};

    pub fn serialize<S: Serializer>(
        slots: &[BTreeMap<DemandKey, f64>],
        s: S,
    ) -> Result<S::Ok, S::Error> {
        let v: Vec<serde_json::Value> = slots.iter().map(super::rates_serde::to_entries).collect();
        serde_json::Value::Array(v)
            .serialize(s)
            .map_err(S::Error::custom)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(
        d: D,
    ) -> Result<Vec<BTreeMap<DemandKey, f64>>, D::Error> {
        let v = Vec::<serde_json::Value>::deserialize(d)?;
        v.into_iter()
            .map(|x| super::rates_serde::from_entries(x).map_err(D::Error::custom))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::tests::service;
    use crate::topology::RandomTopology;
    use std::io::Write;

    fn one_key(rate: f64) -> BTreeMap<DemandKey, f64> {
        BTreeMap::from([(DemandKey::new(1, 1, 0), rate)])
    }

    #[test]
    fn constant_without_noise() {
        let mut rates = one_key(5.0);
        rates.insert(DemandKey::new(1, 2, 3), 5.0);
        let t = slot_arrivals(&RatePattern::constant(rates), 17);
        assert!(t.iter().all(|(_, v)| *v == 5.0));
        assert_eq!(t.len(), 2);
    }

    #[test]
    fn sinusoid_trough_is_zero() {
        let p = RatePattern {
            shape: RateShape::Sinusoid {
                period: 100,
                amplitude: 1.0,
            },
            ..RatePattern::constant(one_key(5.0))
        };
        let v = slot_arrivals(&p, 75).get(&DemandKey::new(1, 1, 0));
        assert!(v.abs() < 1e-12, "{v}");
        approx::assert_relative_eq!(
            slot_arrivals(&p, 25).get(&DemandKey::new(1, 1, 0)),
            10.0,
            epsilon = 1e-12
        );
    }

    #[test]
    fn noisy_slots_are_replayable() {
        let p = RatePattern {
            noise_std: 1.0,
            seed: 7,
            ..RatePattern::constant(one_key(5.0))
        };
        let first = slot_arrivals(&p, 3);
        for _ in 0..100 {
            assert_eq!(slot_arrivals(&p, 3), first);
        }
        assert_ne!(slot_arrivals(&p, 4), first);
    }

    #[test]
    fn frame_average_cases() {
        let key = DemandKey::new(1, 1, 0);
        let mut a = DemandTensor::new(DemandScope::Slot);
        a.set(key, 4.0).unwrap();
        let mut b = DemandTensor::new(DemandScope::Slot);
        b.set(key, 6.0).unwrap();
        let avg = frame_average(&[a.clone(), b]).unwrap();
        assert_eq!(avg.get(&key), 5.0);
        assert_eq!(avg.scope(), DemandScope::FrameAverage);

        let single = frame_average(std::slice::from_ref(&a)).unwrap();
        assert_eq!(single.get(&key), 4.0);
        assert!(matches!(frame_average(&[]), Err(WorkloadError::EmptyFrame)));
        assert!(matches!(frame_average(&[avg]), Err(WorkloadError::WrongScope)));
    }

    #[test]
    fn sinusoid_frame_mean_matches_base() {
        let key = DemandKey::new(1, 1, 0);
        let p = RatePattern {
            shape: RateShape::Sinusoid {
                period: 100,
                amplitude: 0.5,
            },
            noise_std: 1.0,
            seed: 11,
            ..RatePattern::constant(one_key(5.0))
        };
        let slots: Vec<_> = (0..100).map(|t| slot_arrivals(&p, t)).collect();
        let avg = frame_average(&slots).unwrap().get(&key);
        // Independent mean of the same samples.
        let direct: f64 = slots.iter().map(|s| s.get(&key)).sum::<f64>() / 100.0;
        approx::assert_relative_eq!(avg, direct, epsilon = 1e-12);
        // Rates stay above 2.5 so clamping never triggers; the sample mean
        // is within 4 standard errors of the base.
        assert!((avg - 5.0).abs() < 4.0 * 1.0 / 10.0, "{avg}");
    }

    fn small_world() -> (SlaCatalog, ClusterGraph) {
        let cat = validate_catalog(SlaCatalog {
            services: vec![service(1, 1), service(1, 2)],
            channel_count_p: 1,
        })
        .unwrap();
        let g = RandomTopology {
            node_count: 3,
            ..Default::default()
        }
        .generate()
        .unwrap();
        (cat, g)
    }

    fn write_csv(body: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(body.as_bytes()).unwrap();
        f
    }

    #[test]
    fn trace_loading() {
        let (cat, g) = small_world();
        let f = write_csv("slot,node,sla,service,count\n0,0,1,1,3\n0,1,1,2,4.5\n1,2,1,1,1\n");
        let p = load_trace(f.path(), &cat, &g).unwrap();
        assert_eq!(p.keys().len(), 3);
        assert_eq!(slot_arrivals(&p, 0).get(&DemandKey::new(1, 2, 1)), 4.5);
        assert_eq!(slot_arrivals(&p, 1).get(&DemandKey::new(1, 2, 1)), 0.0);

        let neg = write_csv("slot,node,sla,service,count\n0,0,1,1,-1\n");
        assert!(matches!(
            load_trace(neg.path(), &cat, &g),
            Err(WorkloadError::SchemaError { row: 1, .. })
        ));
        let unknown = write_csv("slot,node,sla,service,count\n0,0,1,1,1\n0,9,1,1,1\n");
        assert!(matches!(
            load_trace(unknown.path(), &cat, &g),
            Err(WorkloadError::UnknownId { row: 2, what: "node", .. })
        ));
        let gap = write_csv("slot,node,sla,service,count\n0,0,1,1,1\n2,0,1,1,1\n");
        assert!(matches!(
            load_trace(gap.path(), &cat, &g),
            Err(WorkloadError::SchemaError { .. })
        ));
    }

    #[test]
    fn trace_wraps_around() {
        let (cat, g) = small_world();
        let mut body = String::from("slot,node,sla,service,count\n");
        for t in 0..10 {
            body.push_str(&format!("{t},0,1,1,{}\n", t + 1));
        }
        let f = write_csv(&body);
        let p = load_trace(f.path(), &cat, &g).unwrap();
        assert_eq!(slot_arrivals(&p, 10), slot_arrivals(&p, 0));
        assert_eq!(slot_arrivals(&p, 23), slot_arrivals(&p, 3));
    }

    #[test]
    fn written_trace_reloads_identically() {
        let (cat, g) = small_world();
        let p = RatePattern {
            noise_std: 0.5,
            seed: 3,
            ..RatePattern::constant(synthetic_base_rates(&cat, &g, (1.0, 4.0), 1))
        };
        let f = tempfile::NamedTempFile::new().unwrap();
        write_trace(f.path(), &p, 5).unwrap();
        let q = load_trace(f.path(), &cat, &g).unwrap();
        for t in 0..5 {
            assert_eq!(slot_arrivals(&q, t), slot_arrivals(&p, t));
        }
    }

    #[test]
    fn pattern_json_round_trip() {
        let p = RatePattern {
            shape: RateShape::Sinusoid {
                period: 10,
                amplitude: 0.3,
            },
            noise_std: 0.2,
            seed: 9,
            ..RatePattern::constant(one_key(2.0))
        };
        let text = serde_json::to_string(&p).unwrap();
        assert_eq!(serde_json::from_str::<RatePattern>(&text).unwrap(), p);
    }

    #[test]
    fn synthetic_catalog_is_valid() {
        for seed in 0..10 {
            let cat = SyntheticCatalog {
                seed,
                ..Default::default()
            }
            .generate()
            .unwrap();
            for p in 1..=6 {
                let n = cat.services_at(p).count();
                assert!((2..=4).contains(&n));
            }
        }
    }
}
