//! Value types shared across the simulator: service classes, the SLA
//! catalog, and demand tensors.
//!
//! Units are fixed everywhere: vCPU, MB, megabits, milliseconds.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type NodeId = u32;
pub type CellId = u32;

/// Identifies a service by its SLA level and its index within that level.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ServiceKey {
    pub sla_level: u32,
    pub service_id: u32,
}

impl ServiceKey {
    pub fn new(sla_level: u32, service_id: u32) -> Self {
        Self {
            sla_level,
            service_id,
        }
    }
}

impl fmt::Display for ServiceKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "(p={}, l={})", self.sla_level, self.service_id)
    }
}

/// One service class and its resource and latency profile.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServiceClass {
    pub sla_level: u32,
    pub service_id: u32,
    /// Request packet size, megabits.
    pub packet_size_h: f64,
    /// Memory needed to host one replica, MB.
    pub memory_r: f64,
    /// Compute consumed per dispatched request, vCPU.
    pub compute_w: f64,
    /// Lifecycle (maximum response time), ms.
    pub max_response_t: f64,
    /// Execution time, ms.
    pub exec_time_o: f64,
}

impl ServiceClass {
    pub fn key(&self) -> ServiceKey {
        ServiceKey::new(self.sla_level, self.service_id)
    }

    /// Latency budget left for transmission: `t - o`.
    pub fn slack_ms(&self) -> f64 {
        self.max_response_t - self.exec_time_o
    }

    /// Whether a request can reach a target `latency_ms` away and still
    /// complete within its lifecycle. The inequality is strict.
    pub fn meets_deadline(&self, latency_ms: f64) -> bool {
        self.max_response_t - self.exec_time_o - latency_ms > 0.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlaCatalog {
    pub services: Vec<ServiceClass>,
    pub channel_count_p: u32,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CatalogError {
    #[error("duplicate service {0}")]
    DuplicateService(ServiceKey),
    #[error("service {0} has a non-positive or non-finite resource field `{1}`")]
    NonPositiveResource(ServiceKey, &'static str),
    #[error("service {0}: lifecycle t must exceed execution time o")]
    LifecycleShorterThanExecution(ServiceKey),
    #[error("service {0}: sla level outside 1..={1}")]
    LevelOutOfRange(ServiceKey, u32),
    #[error("service {0}: service id must be >= 1")]
    BadServiceId(ServiceKey),
    #[error("channel count must be >= 1")]
    NoChannels,
    #[error("no services for sla levels {0:?}")]
    MissingLevels(Vec<u32>),
}

impl SlaCatalog {
    pub fn services_at(&self, level: u32) -> impl Iterator<Item = &ServiceClass> {
        self.services.iter().filter(move |s| s.sla_level == level)
    }

    pub fn get(&self, key: ServiceKey) -> Option<&ServiceClass> {
        self.services.iter().find(|s| s.key() == key)
    }

    pub fn keys(&self) -> Vec<ServiceKey> {
        self.services.iter().map(ServiceClass::key).collect()
    }

    /// Strictest lifecycle among the services of `level`.
    pub fn level_deadline(&self, level: u32) -> Option<f64> {
        self.services_at(level)
            .map(|s| s.max_response_t)
            .min_by(f64::total_cmp)
    }
}

/// Checks every service invariant and returns the catalog in canonical
/// `(sla_level, service_id)` order.
pub fn validate_catalog(catalog: SlaCatalog) -> Result<SlaCatalog, CatalogError> {
    let SlaCatalog {
        mut services,
        channel_count_p,
    } = catalog;
    if channel_count_p == 0 {
        return Err(CatalogError::NoChannels);
    }
    services.sort_by_key(ServiceClass::key);

    let mut seen = BTreeSet::new();
    for s in &services {
        let key = s.key();
        if !seen.insert(key) {
            return Err(CatalogError::DuplicateService(key));
        }
        if s.sla_level == 0 || s.sla_level > channel_count_p {
            return Err(CatalogError::LevelOutOfRange(key, channel_count_p));
        }
        if s.service_id == 0 {
            return Err(CatalogError::BadServiceId(key));
        }
        let positive = [
            ("memory_r", s.memory_r),
            ("compute_w", s.compute_w),
            ("max_response_t", s.max_response_t),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(CatalogError::NonPositiveResource(key, name));
            }
        }
        let non_negative = [
            ("packet_size_h", s.packet_size_h),
            ("exec_time_o", s.exec_time_o),
        ];
        for (name, v) in non_negative {
            if !(v.is_finite() && v >= 0.0) {
                return Err(CatalogError::NonPositiveResource(key, name));
            }
        }
        if s.max_response_t <= s.exec_time_o {
            return Err(CatalogError::LifecycleShorterThanExecution(key));
        }
    }

    let missing: Vec<u32> = (1..=channel_count_p)
        .filter(|p| !services.iter().any(|s| s.sla_level == *p))
        .collect();
    if !missing.is_empty() {
        return Err(CatalogError::MissingLevels(missing));
    }

    Ok(SlaCatalog {
        services,
        channel_count_p,
    })
}

/// Coordinates of one demand entry: service arriving at a node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct DemandKey {
    pub service: ServiceKey,
    pub node: NodeId,
}

impl DemandKey {
    pub fn new(sla_level: u32, service_id: u32, node: NodeId) -> Self {
        Self {
            service: ServiceKey::new(sla_level, service_id),
            node,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DemandScope {
    Slot,
    FrameAverage,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DemandError {
    #[error("demand entry {0:?} is negative or not finite: {1}")]
    InvalidCount(DemandKey, f64),
}

/// Request counts λ keyed by (service, node). Missing entries read as zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemandTensor {
    counts: BTreeMap<DemandKey, f64>,
    scope: DemandScope,
}

impl DemandTensor {
    pub fn new(scope: DemandScope) -> Self {
        Self {
            counts: BTreeMap::new(),
            scope,
        }
    }

    pub fn from_counts(
        counts: BTreeMap<DemandKey, f64>,
        scope: DemandScope,
    ) -> Result<Self, DemandError> {
        for (k, v) in &counts {
            if !(v.is_finite() && *v >= 0.0) {
                return Err(DemandError::InvalidCount(*k, *v));
            }
        }
        Ok(Self { counts, scope })
    }

    pub fn scope(&self) -> DemandScope {
        self.scope
    }

    pub fn get(&self, key: &DemandKey) -> f64 {
        self.counts.get(key).copied().unwrap_or(0.0)
    }

    pub fn rate(&self, service: ServiceKey, node: NodeId) -> f64 {
        self.get(&DemandKey { service, node })
    }

    pub fn set(&mut self, key: DemandKey, count: f64) -> Result<(), DemandError> {
        if !(count.is_finite() && count >= 0.0) {
            return Err(DemandError::InvalidCount(key, count));
        }
        self.counts.insert(key, count);
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&DemandKey, &f64)> {
        self.counts.iter()
    }

    pub fn len(&self) -> usize {
        self.counts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    pub fn total(&self) -> f64 {
        self.counts.values().sum()
    }

    pub(crate) fn with_scope(mut self, scope: DemandScope) -> Self {
        self.scope = scope;
        self
    }
}
