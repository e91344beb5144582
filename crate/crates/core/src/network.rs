//! Simulated exchange of local control filters between nodes.
//!
//! Every node publishes its local filter once per sample. Each receiver then
//! takes a snapshot that decides, per the communication policy, which
//! published version of every peer it holds:
//!
//! * `Ideal`: the version published at the current sample.
//! * `Delay(p)`: the version published `p` samples ago (the zero filter
//!   published at sample 0 while `n < p`).
//! * `Intermittent`: the current version at communication events, otherwise
//!   whatever was delivered at the last event.
//!
//! Version stamps are sample indices. Before the first delivery a receiver
//! holds the zero vector with stamp 0.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dsp::noise_rng;
use crate::error::{Error, Result};

/// Retained history when no explicit capacity is requested, in samples.
pub const DEFAULT_CAPACITY: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schedule {
    /// Independent event with probability `rate / fs` at every sample.
    Bernoulli,
    /// One event every `round(fs / rate)` samples, at multiples of the period.
    Periodic,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum CommPolicy {
    Ideal,
    Delay(usize),
    Intermittent {
        /// Communication events per second at each receiver.
        rate: f64,
        seed: u64,
        schedule: Schedule,
    },
}

impl CommPolicy {
    pub fn validate(&self, fs: f64) -> Result<()> {
        if let CommPolicy::Intermittent { rate, .. } = *self {
            if !(rate > 0.0 && rate <= fs) {
                return Err(Error::config(format!(
                    "communication rate must lie in (0, fs={fs}], got {rate}"
                )));
            }
        }
        Ok(())
    }

    /// History the bus must retain, in samples of age.
    pub fn required_capacity(&self) -> usize {
        match *self {
            CommPolicy::Delay(p) => p,
            _ => 0,
        }
    }

    pub fn with_seed(self, seed: u64) -> Self {
        match self {
            CommPolicy::Intermittent { rate, schedule, .. } => CommPolicy::Intermittent { rate, seed, schedule },
            other => other,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CommPolicy::Ideal => "ideal",
            CommPolicy::Delay(_) => "delay",
            CommPolicy::Intermittent { .. } => "intermittent",
        }
    }
}

/// `ideal`, `delay:<samples>` or `intermittent:<events-per-second>[:periodic]`.
/// The intermittent seed is not part of the text form; it defaults to 0 and is
/// set with [`CommPolicy::with_seed`].
impl FromStr for CommPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.trim().split(':').collect();
        let bad = || Error::config(format!("unrecognized communication policy `{s}`"));
        match parts.as_slice() {
            ["ideal"] => Ok(CommPolicy::Ideal),
            ["delay", p] => p.parse().map(CommPolicy::Delay).map_err(|_| bad()),
            ["intermittent", r, rest @ ..] => {
                let rate: f64 = r.parse().map_err(|_| bad())?;
                let schedule = match rest {
                    [] | ["bernoulli"] => Schedule::Bernoulli,
                    ["periodic"] => Schedule::Periodic,
                    _ => return Err(bad()),
                };
                Ok(CommPolicy::Intermittent {
                    rate,
                    seed: 0,
                    schedule,
                })
            }
            _ => Err(bad()),
        }
    }
}

impl fmt::Display for CommPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CommPolicy::Ideal => write!(f, "ideal"),
            CommPolicy::Delay(p) => write!(f, "delay:{p}"),
            CommPolicy::Intermittent { rate, schedule, .. } => match schedule {
                Schedule::Bernoulli => write!(f, "intermittent:{rate}"),
                Schedule::Periodic => write!(f, "intermittent:{rate}:periodic"),
            },
        }
    }
}

/// One peer's entry in a snapshot. `coeffs` is present only when a newer
/// version than the receiver's previous one was delivered.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PeerUpdate<'a> {
    pub sender: usize,
    pub stamp: u64,
    pub coeffs: Option<&'a [f64]>,
}

#[derive(Debug, Clone)]
struct Ring {
    data: Vec<f64>,
    stamps: Vec<Option<u64>>,
    last: Option<u64>,
}

/// Counts of staleness `n - stamp`, indexed by age in samples.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Histogram {
    counts: Vec<u64>,
}

impl Histogram {
    fn add(&mut self, age: u64) {
        let i = age as usize;
        if i >= self.counts.len() {
            self.counts.resize(i + 1, 0);
        }
        self.counts[i] += 1;
    }

    pub fn count(&self, age: u64) -> u64 {
        self.counts.get(age as usize).copied().unwrap_or(0)
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        let total = self.total();
        if total == 0 {
            return 0.0;
        }
        let weighted: f64 = self
            .counts
            .iter()
            .enumerate()
            .map(|(a, &c)| a as f64 * c as f64)
            .sum();
        weighted / total as f64
    }

    pub fn max_age(&self) -> Option<u64> {
        self.counts.iter().rposition(|&c| c > 0).map(|a| a as u64)
    }

    /// Non-zero `(age, count)` pairs in increasing age.
    pub fn entries(&self) -> impl Iterator<Item = (u64, u64)> + '_ {
        self.counts
            .iter()
            .enumerate()
            .filter(|(_, &c)| c > 0)
            .map(|(a, &c)| (a as u64, c))
    }
}

/// The coefficient exchange shared by all nodes of one run.
#[derive(Debug, Clone)]
pub struct CoefficientBus {
    policy: CommPolicy,
    fs: f64,
    taps: usize,
    capacity: usize,
    zeros: Vec<f64>,
    rings: Vec<Ring>,
    delivered: Vec<Vec<u64>>,
    event_rngs: Vec<ChaCha8Rng>,
    staleness: Vec<Vec<Histogram>>,
    events: Vec<u64>,
}

impl CoefficientBus {
    /// `capacity` is the largest age (in samples) still retrievable.
    pub fn new(n_nodes: usize, taps: usize, policy: CommPolicy, fs: f64, capacity: usize) -> Result<Self> {
        policy.validate(fs)?;
        if n_nodes == 0 || taps == 0 {
            return Err(Error::arg("bus needs at least one node and one tap"));
        }
        if policy.required_capacity() > capacity {
            return Err(Error::config(format!(
                "bus capacity {capacity} cannot hold a delay of {}",
                policy.required_capacity()
            )));
        }
        let slots = capacity + 1;
        let seed = match policy {
            CommPolicy::Intermittent { seed, .. } => seed,
            _ => 0,
        };
        Ok(Self {
            policy,
            fs,
            taps,
            capacity,
            zeros: vec![0.0; taps],
            rings: (0..n_nodes)
                .map(|_| Ring {
                    data: vec![0.0; slots * taps],
                    stamps: vec![None; slots],
                    last: None,
                })
                .collect(),
            delivered: vec![vec![0; n_nodes]; n_nodes],
            event_rngs: (0..n_nodes).map(|r| noise_rng(seed, 0xb0_0000 + r as u64)).collect(),
            staleness: vec![vec![Histogram::default(); n_nodes]; n_nodes],
            events: vec![0; n_nodes],
        })
    }

    /// Bus with the smallest history the policy needs.
    pub fn for_policy(n_nodes: usize, taps: usize, policy: CommPolicy, fs: f64) -> Result<Self> {
        Self::new(n_nodes, taps, policy, fs, policy.required_capacity())
    }

    pub fn policy(&self) -> CommPolicy {
        self.policy
    }

    pub fn n_nodes(&self) -> usize {
        self.rings.len()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Store node `k`'s filter as version `n`. Stamps must strictly increase.
    pub fn publish(&mut self, k: usize, psi: &[f64], n: u64) -> Result<()> {
        if k >= self.rings.len() {
            return Err(Error::arg(format!("sender {k} out of range")));
        }
        if psi.len() != self.taps {
            return Err(Error::arg(format!(
                "published filter has {} taps, bus carries {}",
                psi.len(),
                self.taps
            )));
        }
        let ring = &mut self.rings[k];
        if let Some(last) = ring.last {
            if n <= last {
                return Err(Error::Contract(format!(
                    "node {k} published stamp {n} after {last}"
                )));
            }
        }
        let slot = (n % (self.capacity as u64 + 1)) as usize;
        ring.data[slot * self.taps..(slot + 1) * self.taps].copy_from_slice(psi);
        ring.stamps[slot] = Some(n);
        ring.last = Some(n);
        Ok(())
    }

    /// Version `stamp` of `sender`, or the zero vector with stamp 0 once it
    /// has left the retained history (or was never published).
    pub fn lookup(&self, sender: usize, stamp: u64) -> (&[f64], u64) {
        let ring = &self.rings[sender];
        let slot = (stamp % (self.capacity as u64 + 1)) as usize;
        if ring.stamps[slot] == Some(stamp) {
            (&ring.data[slot * self.taps..(slot + 1) * self.taps], stamp)
        } else {
            (&self.zeros, 0)
        }
    }

    fn has_event(&mut self, receiver: usize, n: u64) -> bool {
        match self.policy {
            CommPolicy::Intermittent { rate, schedule, .. } => match schedule {
                Schedule::Bernoulli => self.event_rngs[receiver].random::<f64>() < rate / self.fs,
                Schedule::Periodic => {
                    let period = (self.fs / rate).round().max(1.0) as u64;
                    n.is_multiple_of(period)
                }
            },
            _ => true,
        }
    }

    /// Decide which peer versions `receiver` holds at sample `n` and record
    /// their staleness.
    pub fn snapshot(&mut self, receiver: usize, n: u64) -> Vec<PeerUpdate<'_>> {
        let n_nodes = self.rings.len();
        let target = match self.policy {
            CommPolicy::Ideal => Some(n),
            CommPolicy::Delay(p) => Some(n.saturating_sub(p as u64)),
            CommPolicy::Intermittent { .. } => {
                if self.has_event(receiver, n) {
                    self.events[receiver] += 1;
                    Some(n)
                } else {
                    None
                }
            }
        };
        let mut fresh = vec![false; n_nodes];
        if let Some(t) = target {
            for sender in (0..n_nodes).filter(|&s| s != receiver) {
                let stamp = self.lookup(sender, t).1;
                if stamp != self.delivered[receiver][sender] {
                    fresh[sender] = true;
                }
                self.delivered[receiver][sender] = stamp;
            }
        }
        for sender in (0..n_nodes).filter(|&s| s != receiver) {
            let age = n.saturating_sub(self.delivered[receiver][sender]);
            self.staleness[receiver][sender].add(age);
        }
        let this = &*self;
        (0..n_nodes)
            .filter(|&s| s != receiver)
            .map(|sender| {
                let stamp = this.delivered[receiver][sender];
                PeerUpdate {
                    sender,
                    stamp,
                    coeffs: fresh[sender].then(|| this.lookup(sender, stamp).0),
                }
            })
            .collect()
    }

    /// Stamp currently delivered from `sender` to `receiver`.
    pub fn delivered(&self, receiver: usize, sender: usize) -> u64 {
        self.delivered[receiver][sender]
    }

    /// Intermittent communication events seen by `receiver`.
    pub fn events(&self, receiver: usize) -> u64 {
        self.events[receiver]
    }

    pub fn staleness(&self, receiver: usize, sender: usize) -> &Histogram {
        &self.staleness[receiver][sender]
    }

    pub fn staleness_stats(&self) -> StalenessStats {
        let n = self.rings.len();
        let mut pairs = Vec::new();
        for r in 0..n {
            for s in (0..n).filter(|&s| s != r) {
                pairs.push(((r, s), self.staleness[r][s].clone()));
            }
        }
        StalenessStats {
            policy: self.policy,
            pairs,
        }
    }
}

/// Per-(receiver, sender) staleness histograms of one run.
#[derive(Debug, Clone, PartialEq)]
pub struct StalenessStats {
    pub policy: CommPolicy,
    pub pairs: Vec<((usize, usize), Histogram)>,
}

impl StalenessStats {
    /// Mean staleness over all pairs and samples.
    pub fn mean(&self) -> f64 {
        let (mut w, mut t) = (0.0, 0u64);
        for (_, h) in &self.pairs {
            w += h.mean() * h.total() as f64;
            t += h.total();
        }
        if t == 0 {
            0.0
        } else {
            w / t as f64
        }
    }
}
