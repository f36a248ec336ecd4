//! Scenario description: what to run, with which faults, for how long.
//!
//! Scenarios are plain data so a run can be saved and replayed exactly. Node
//! selections are resolved to explicit indices when a scenario is built, never
//! at run time.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use rapid_core::model::ProtocolParams;

use crate::SimError;

/// Message delay bounds, in ticks, for every link.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LinkModel {
    pub delay_min: u64,
    pub delay_max: u64,
}

impl Default for LinkModel {
    fn default() -> Self {
        LinkModel {
            delay_min: 1,
            delay_max: 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModeSpec {
    Decentralized,
    /// Rapid-C: `aux` extra processes form the ensemble that manages the
    /// membership of the `n` monitored members.
    Centralized {
        aux: usize,
    },
}

/// A timed injection. Node indices refer to the initial members `0..n`,
/// then joiners in spawn order, then auxiliary nodes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Event {
    Crash {
        tick: u64,
        nodes: Vec<usize>,
    },
    JoinWave {
        tick: u64,
        count: usize,
        seed: usize,
    },
    /// Per-node loss probabilities on incoming and outgoing messages,
    /// in force from `tick` until `until` (exclusive, `None` = forever).
    Link {
        tick: u64,
        until: Option<u64>,
        nodes: Vec<usize>,
        ingress: f64,
        egress: f64,
    },
    /// Alternating windows of `period` ticks: ingress loss `drop` first,
    /// then a clean window, and so on.
    FlipFlop {
        tick: u64,
        until: Option<u64>,
        nodes: Vec<usize>,
        period: u64,
        drop: f64,
    },
    /// Messages between different groups are lost from `tick` until `until`.
    /// Nodes in no group form one implicit group.
    Partition {
        tick: u64,
        until: Option<u64>,
        groups: Vec<Vec<usize>>,
    },
    Leave {
        tick: u64,
        node: usize,
    },
}

impl Event {
    pub fn tick(&self) -> u64 {
        match self {
            Event::Crash { tick, .. }
            | Event::JoinWave { tick, .. }
            | Event::Link { tick, .. }
            | Event::FlipFlop { tick, .. }
            | Event::Partition { tick, .. }
            | Event::Leave { tick, .. } => *tick,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub name: String,
    /// Initial members.
    pub n: usize,
    pub params: ProtocolParams,
    pub seed: u64,
    pub duration: u64,
    pub mode: ModeSpec,
    #[serde(default)]
    pub link: LinkModel,
    #[serde(default)]
    pub events: Vec<Event>,
    #[serde(default)]
    pub implicit_local_only: bool,
    #[serde(default)]
    pub fanout: Option<usize>,
}

fn pick(n: usize, count: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v = sample(&mut rng, n, count.min(n)).into_vec();
    v.sort_unstable();
    v
}

impl Scenario {
    pub fn new(name: impl Into<String>, n: usize, params: ProtocolParams, seed: u64, duration: u64) -> Self {
        Scenario {
            name: name.into(),
            n,
            params,
            seed,
            duration,
            mode: ModeSpec::Decentralized,
            link: LinkModel::default(),
            events: Vec::new(),
            implicit_local_only: false,
            fanout: None,
        }
    }

    /// `fail` random members crash together at tick 50.
    pub fn crash(n: usize, fail: usize, params: ProtocolParams, seed: u64) -> Self {
        let mut s = Self::new("crash", n, params, seed, 200);
        s.events.push(Event::Crash {
            tick: 50,
            nodes: pick(n, fail, seed ^ 0xc4a5),
        });
        s
    }

    /// One seed plus `n - 1` joiners that all start at tick 1.
    pub fn bootstrap(n: usize, params: ProtocolParams, seed: u64) -> Self {
        let mut s = Self::new("bootstrap", 1, params, seed, 400);
        s.events.push(Event::JoinWave {
            tick: 1,
            count: n.saturating_sub(1),
            seed: 0,
        });
        s
    }

    /// `ceil(fraction * n)` members lose all incoming traffic in alternating
    /// 20-tick windows from tick 50.
    pub fn flip_flop(n: usize, fraction: f64, params: ProtocolParams, seed: u64) -> Self {
        let mut s = Self::new("flip_flop", n, params, seed, 400);
        let count = ((n as f64 * fraction).ceil() as usize).max(1);
        s.events.push(Event::FlipFlop {
            tick: 50,
            until: None,
            nodes: pick(n, count, seed ^ 0xf1f1),
            period: 20,
            drop: 1.0,
        });
        s
    }

    /// `ceil(fraction * n)` members drop `loss` of their outgoing messages from tick 50.
    pub fn egress_loss(n: usize, fraction: f64, loss: f64, params: ProtocolParams, seed: u64) -> Self {
        let mut s = Self::new("egress_loss", n, params, seed, 400);
        let count = ((n as f64 * fraction).ceil() as usize).max(1);
        s.events.push(Event::Link {
            tick: 50,
            until: None,
            nodes: pick(n, count, seed ^ 0xe9e5),
            ingress: 0.0,
            egress: loss,
        });
        s
    }

    /// A random minority of `minority` members is cut off from tick 50 to `heal`.
    pub fn partition(n: usize, minority: usize, heal: u64, params: ProtocolParams, seed: u64) -> Self {
        let mut s = Self::new("partition", n, params, seed, heal + 150);
        s.events.push(Event::Partition {
            tick: 50,
            until: Some(heal),
            groups: vec![pick(n, minority, seed ^ 0x9a27)],
        });
        s
    }

    /// Rapid-C: `aux` ensemble nodes manage `n` members; `fail` members crash at tick 50.
    pub fn centralized(n: usize, aux: usize, fail: usize, params: ProtocolParams, seed: u64) -> Self {
        let mut s = Self::crash(n, fail, params, seed);
        s.name = "centralized".into();
        s.mode = ModeSpec::Centralized { aux };
        s
    }

    /// A random small cluster under random loss windows, partitions, crashes
    /// (at most a quarter of the members) and joins.
    pub fn adversarial(seed: u64) -> Self {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.gen_range(4..=24);
        let k = rng.gen_range(3..=10);
        let h = rng.gen_range(1..=k);
        let l = rng.gen_range(1..=h);
        let mut params = ProtocolParams::with_watermarks(k, h, l);
        params.fast_round_timeout = rng.gen_range(5..=30);
        params.reinforcement_timeout = rng.gen_range(5..=20);
        let mut s = Self::new("adversarial", n, params, seed, 300);
        s.link.delay_max = rng.gen_range(1..=4);
        let crashes = rng.gen_range(0..=n / 4);
        if crashes > 0 {
            s.events.push(Event::Crash {
                tick: rng.gen_range(10..150),
                nodes: pick(n, crashes, rng.gen()),
            });
        }
        let mut population = n;
        if rng.gen_bool(0.3) {
            let count = rng.gen_range(1..=4);
            s.events.push(Event::JoinWave {
                tick: rng.gen_range(5..120),
                count,
                seed: rng.gen_range(0..n),
            });
            population += count;
        }
        for _ in 0..rng.gen_range(0..=3) {
            let tick = rng.gen_range(0..200);
            let nodes = pick(population, rng.gen_range(1..=population.div_ceil(3)), rng.gen());
            s.events.push(Event::Link {
                tick,
                until: Some(tick + rng.gen_range(5..80)),
                nodes,
                ingress: rng.gen_range(0.0..0.9),
                egress: rng.gen_range(0.0..0.9),
            });
        }
        if rng.gen_bool(0.4) {
            let tick = rng.gen_range(0..200);
            let side = rng.gen_range(1..=population / 2);
            s.events.push(Event::Partition {
                tick,
                until: Some(tick + rng.gen_range(10..100)),
                groups: vec![pick(population, side, rng.gen())],
            });
        }
        if rng.gen_bool(0.2) {
            s.events.push(Event::FlipFlop {
                tick: rng.gen_range(0..150),
                until: None,
                nodes: vec![rng.gen_range(0..n)],
                period: rng.gen_range(3..25),
                drop: 1.0,
            });
        }
        s
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::Invalid(m));
        self.params.validate().map_err(|e| SimError::Invalid(e.to_string()))?;
        if self.n == 0 {
            return bad("n must be at least 1".into());
        }
        if self.link.delay_min == 0 || self.link.delay_min > self.link.delay_max {
            return bad(format!(
                "delays must satisfy 1 <= delay_min <= delay_max (got {}..{})",
                self.link.delay_min, self.link.delay_max
            ));
        }
        if let ModeSpec::Centralized { aux } = self.mode {
            if aux == 0 {
                return bad("centralized mode needs at least one auxiliary node".into());
            }
            if self.events.iter().any(|e| matches!(e, Event::JoinWave { .. })) {
                return bad("join waves are only supported in decentralized mode".into());
            }
        }
        let mut population = self.n;
        let mut events: Vec<&Event> = self.events.iter().collect();
        events.sort_by_key(|e| e.tick());
        for e in &events {
            if let Event::JoinWave { count, seed, .. } = e {
                if *seed >= population {
                    return bad(format!("join seed {seed} does not exist yet"));
                }
                population += count;
            }
        }
        // Auxiliary nodes come last and can be crashed or cut off too.
        if let ModeSpec::Centralized { aux } = self.mode {
            population += aux;
        }
        let prob = |p: f64| (0.0..=1.0).contains(&p);
        for e in &events {
            let nodes: &[usize] = match e {
                Event::Crash { nodes, .. } | Event::Link { nodes, .. } | Event::FlipFlop { nodes, .. } => nodes,
                Event::Leave { node, .. } => std::slice::from_ref(node),
                Event::Partition { groups, .. } => {
                    for g in groups {
                        if let Some(i) = g.iter().find(|i| **i >= population) {
                            return bad(format!("partition names unknown node {i}"));
                        }
                    }
                    &[]
                }
                Event::JoinWave { .. } => &[],
            };
            if let Some(i) = nodes.iter().find(|i| **i >= population) {
                return bad(format!("event at tick {} names unknown node {i}", e.tick()));
            }
            match e {
                Event::Link { ingress, egress, .. } if !prob(*ingress) || !prob(*egress) => {
                    return bad("loss probabilities must lie in [0, 1]".into());
                }
                Event::FlipFlop { drop, period, .. } if !prob(*drop) || *period == 0 => {
                    return bad("flip-flop needs a positive period and drop in [0, 1]".into());
                }
                _ => {}
            }
            if let Event::Link {
                tick, until: Some(u), ..
            }
            | Event::FlipFlop {
                tick, until: Some(u), ..
            }
            | Event::Partition {
                tick, until: Some(u), ..
            } = e
            {
                if u <= tick {
                    return bad(format!("window ends at {u}, before it starts at {tick}"));
                }
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenarios always serialize")
    }

    pub fn from_json(s: &str) -> Result<Self, SimError> {
        let sc: Scenario = serde_json::from_str(s).map_err(|e| SimError::Invalid(e.to_string()))?;
        sc.validate()?;
        Ok(sc)
    }

    /// Nodes hit by link faults (their own removal is expected).
    pub fn faulty_nodes(&self) -> Vec<usize> {
        let mut v: Vec<usize> = self
            .events
            .iter()
            .flat_map(|e| match e {
                Event::Link { nodes, .. } | Event::FlipFlop { nodes, .. } => nodes.clone(),
                _ => Vec::new(),
            })
            .collect();
        v.sort_unstable();
        v.dedup();
        v
    }

    pub fn crashed_nodes(&self) -> Vec<usize> {
        let mut v: Vec<usize> = self
            .events
            .iter()
            .flat_map(|e| match e {
                Event::Crash { nodes, .. } => nodes.clone(),
                _ => Vec::new(),
            })
            .collect();
        v.sort_unstable();
        v.dedup();
        v
    }

    /// Last tick at which any fault starts or ends.
    pub fn last_fault_tick(&self) -> u64 {
        self.events
            .iter()
            .map(|e| match e {
                Event::Link { until: Some(u), .. }
                | Event::FlipFlop { until: Some(u), .. }
                | Event::Partition { until: Some(u), .. } => *u,
                e => e.tick(),
            })
            .max()
            .unwrap_or(0)
    }
}
