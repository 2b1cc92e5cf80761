//! Synthetic site traces and multi-tab session mixing.
//!
//! Real captures are replaced by burst-structured renewal processes: each
//! site has a fixed plan of alternating bursts, and every visit samples the
//! burst sizes and gaps around that plan. Sessions are then mixed the way
//! tabs are opened in a browser: one after another, separated by uniform
//! random gaps, with the merged capture cut at a fixed session length.

use std::collections::BTreeMap;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_distr::{Distribution, Exp, Gamma, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::SynthError;
use crate::seed::{child_rng, SeededRng};
use crate::trace::{Direction, LabelVector, PacketEvent, Session, SiteLabel, Trace};

/// Shape parameter of the gamma-distributed inter-burst gaps.
const GAP_SHAPE: f64 = 4.0;

/// One burst of a site's plan.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BurstSpec {
    pub direction: Direction,
    /// Expected packets in the burst; counts are `1 + Poisson(mean - 1)`.
    pub mean_packets: f64,
    /// Expected idle time before the burst starts (ignored for the first).
    pub mean_gap: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SiteModel {
    pub site_id: usize,
    pub label: SiteLabel,
    pub bursts: Vec<BurstSpec>,
    /// Packets per second inside a burst.
    pub base_rate: f64,
}

impl SiteModel {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| {
            Err(SynthError::BadMixConfig(format!(
                "site {}: {m}",
                self.site_id
            )))
        };
        if self.bursts.len() < 2 {
            return bad("fewer than 2 bursts");
        }
        if !(self.base_rate > 0.0) {
            return bad("base rate must be positive");
        }
        for b in &self.bursts {
            if !(b.mean_packets > 1.0) || !(b.mean_gap > 0.0) {
                return bad("burst parameters must be positive (mean packets > 1)");
            }
        }
        Ok(())
    }
}

fn random_plan(site_id: usize, label: SiteLabel, rng: &mut SeededRng) -> SiteModel {
    let n_bursts = rng.random_range(8..=24);
    let bursts = (0..n_bursts)
        .map(|i| {
            let direction = if i % 2 == 0 {
                Direction::Out
            } else {
                Direction::In
            };
            let mean_packets = match direction {
                Direction::Out => rng.random_range(1.5..8.0),
                Direction::In => rng.random_range(3.0..80.0),
            };
            BurstSpec {
                direction,
                mean_packets,
                mean_gap: rng.random_range(0.02..0.8),
            }
        })
        .collect();
    SiteModel {
        site_id,
        label,
        bursts,
        base_rate: rng.random_range(80.0..400.0),
    }
}

/// Deterministic in `(site_id, seed)`; the plan is drawn from continuous
/// distributions, so different sites get different plans.
pub fn generate_site_model(site_id: usize, seed: u64) -> SiteModel {
    let mut rng = child_rng(seed, "site-model", site_id as u64);
    random_plan(site_id, SiteLabel::Monitored(site_id), &mut rng)
}

/// Same generator as [`generate_site_model`] on an independent stream, for
/// the open-world background set.
pub fn generate_unmonitored_model(index: usize, seed: u64) -> SiteModel {
    let mut rng = child_rng(seed, "unmonitored-model", index as u64);
    random_plan(index, SiteLabel::Unmonitored, &mut rng)
}

/// Samples one visit. The first packet is at time 0.
pub fn sample_trace(model: &SiteModel, rng: &mut SeededRng) -> Trace {
    let within = Exp::new(model.base_rate).expect("positive base rate");
    let mut events = Vec::new();
    let mut t = 0.0f64;
    for (i, burst) in model.bursts.iter().enumerate() {
        if i > 0 {
            let gap = Gamma::new(GAP_SHAPE, burst.mean_gap / GAP_SHAPE).expect("positive gap");
            t += gap.sample(rng);
        }
        let extra = Poisson::new(burst.mean_packets - 1.0)
            .expect("positive mean")
            .sample(rng) as usize;
        for j in 0..=extra {
            if j > 0 {
                t += within.sample(rng);
            }
            events.push(PacketEvent::real(t, burst.direction));
        }
    }
    Trace::new(events, model.label).expect("times are accumulated non-negative gaps")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MixConfig {
    /// Tab counts a fixed-k dataset may ask for.
    pub tab_counts: Vec<usize>,
    /// Bounds of the uniform gap between consecutive tab openings (s).
    pub gap_range: (f64, f64),
    /// Merged sessions are cut at this time (s).
    pub session_cap: f64,
    /// Tab-count mixture for dynamic datasets.
    pub dynamic_proportions: BTreeMap<usize, f64>,
}

impl Default for MixConfig {
    fn default() -> Self {
        Self {
            tab_counts: vec![1, 2, 3, 4, 5],
            gap_range: (3.0, 10.0),
            session_cap: 240.0,
            dynamic_proportions: BTreeMap::from([(2, 0.40), (3, 0.30), (4, 0.20), (5, 0.10)]),
        }
    }
}

impl MixConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::BadMixConfig(m));
        let (lo, hi) = self.gap_range;
        if !(lo >= 0.0 && lo <= hi && hi.is_finite()) {
            return bad(format!("gap range [{lo}, {hi}]"));
        }
        if !(self.session_cap > 0.0) {
            return bad(format!("session cap {}", self.session_cap));
        }
        if self.tab_counts.contains(&0) {
            return bad("tab count 0".into());
        }
        let total: f64 = self.dynamic_proportions.values().sum();
        if (total - 1.0).abs() > 1e-9 {
            return bad(format!("dynamic proportions sum to {total}"));
        }
        if self
            .dynamic_proportions
            .iter()
            .any(|(&k, &p)| k == 0 || !(p >= 0.0))
        {
            return bad("dynamic proportions need k >= 1 and non-negative mass".into());
        }
        Ok(())
    }

    fn sample_tab_count(&self, rng: &mut SeededRng) -> usize {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (&k, &p) in &self.dynamic_proportions {
            acc += p;
            if u < acc {
                return k;
            }
        }
        *self
            .dynamic_proportions
            .keys()
            .next_back()
            .expect("validated non-empty")
    }
}

/// Shifts tab `i` by `offsets[i]`, merges all tabs into one time-sorted
/// stream and drops events later than `cap`. Ties keep tab order.
pub fn merge_tabs(
    traces: &[Trace],
    offsets: &[f64],
    cap: f64,
    n_sites: usize,
) -> Result<Session, SynthError> {
    if traces.is_empty() {
        return Err(SynthError::EmptyInput);
    }
    assert_eq!(traces.len(), offsets.len(), "one offset per tab");
    let mut events = Vec::with_capacity(traces.iter().map(Trace::len).sum());
    let mut labels = LabelVector::zeros(n_sites);
    for (trace, &offset) in traces.iter().zip(offsets) {
        labels.set(trace.label)?;
        events.extend(
            trace
                .events()
                .iter()
                .map(|e| PacketEvent {
                    time: e.time + offset,
                    ..*e
                })
                .filter(|e| e.time <= cap),
        );
    }
    let trace = Trace::from_unsorted(events, SiteLabel::Unmonitored)?;
    Ok(Session {
        trace,
        labels,
        tab_count: traces.len(),
        tab_offsets: offsets.to_vec(),
        defense: None,
    })
}

/// Draws the tab offsets (first 0, then i.i.d. uniform gaps) and merges.
pub fn synthesize_session(
    traces: &[Trace],
    rng: &mut SeededRng,
    cfg: &MixConfig,
    n_sites: usize,
) -> Result<Session, SynthError> {
    if traces.is_empty() {
        return Err(SynthError::EmptyInput);
    }
    let (lo, hi) = cfg.gap_range;
    let mut offsets = Vec::with_capacity(traces.len());
    let mut t = 0.0;
    offsets.push(t);
    for _ in 1..traces.len() {
        t += if hi > lo {
            rng.random_range(lo..=hi)
        } else {
            lo
        };
        offsets.push(t);
    }
    merge_tabs(traces, &offsets, cfg.session_cap, n_sites)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum World {
    /// Every tab visits a monitored site.
    Closed,
    /// One tab per session visits an unmonitored site.
    Open,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TabMode {
    /// Every session has exactly this many tabs, all on distinct sites.
    Fixed(usize),
    /// Tab counts follow [`MixConfig::dynamic_proportions`]; a site may
    /// appear in several tabs of one session.
    Dynamic,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub world: World,
    pub tabs: TabMode,
    pub count: usize,
}

/// Sessions together with the single-tab traces they were mixed from.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub n_sites: usize,
    pub sessions: Vec<Session>,
    pub sources: Vec<Vec<Trace>>,
}

fn pick_sites<'a>(
    monitored: &'a [SiteModel],
    unmonitored: &'a [SiteModel],
    world: World,
    tabs: TabMode,
    cfg: &MixConfig,
    rng: &mut SeededRng,
) -> Result<Vec<&'a SiteModel>, SynthError> {
    let k = match tabs {
        TabMode::Fixed(k) => k,
        TabMode::Dynamic => cfg.sample_tab_count(rng),
    };
    let n_monitored = match world {
        World::Closed => k,
        World::Open => k - 1,
    };
    let mut picks: Vec<&SiteModel> = match tabs {
        TabMode::Fixed(_) => monitored.choose_multiple(rng, n_monitored).collect(),
        TabMode::Dynamic => (0..n_monitored)
            .map(|_| monitored.choose(rng).expect("non-empty monitored set"))
            .collect(),
    };
    if world == World::Open {
        let background = unmonitored
            .choose(rng)
            .ok_or(SynthError::InsufficientSites {
                requested: 1,
                available: 0,
            })?;
        picks.push(background);
        picks.shuffle(rng);
    }
    Ok(picks)
}

/// Builds `spec.count` sessions. Session `i` draws all of its randomness from
/// the child stream `("session", i)` of `seed`.
pub fn build_dataset(
    monitored: &[SiteModel],
    unmonitored: &[SiteModel],
    spec: &DatasetSpec,
    cfg: &MixConfig,
    seed: u64,
) -> Result<Dataset, SynthError> {
    cfg.validate()?;
    if spec.count == 0 || monitored.is_empty() {
        return Err(SynthError::EmptyInput);
    }
    if let TabMode::Fixed(k) = spec.tabs {
        if k == 0 || (spec.world == World::Open && k < 1) {
            return Err(SynthError::BadMixConfig(format!("tab count {k}")));
        }
        if !cfg.tab_counts.contains(&k) {
            return Err(SynthError::BadMixConfig(format!(
                "tab count {k} not in {:?}",
                cfg.tab_counts
            )));
        }
        let needed = match spec.world {
            World::Closed => k,
            World::Open => k - 1,
        };
        if needed > monitored.len() {
            return Err(SynthError::InsufficientSites {
                requested: needed,
                available: monitored.len(),
            });
        }
    }
    if spec.world == World::Open && unmonitored.is_empty() {
        return Err(SynthError::InsufficientSites {
            requested: 1,
            available: 0,
        });
    }
    let n_sites = monitored.len();
    let built: Vec<(Session, Vec<Trace>)> = (0..spec.count)
        .into_par_iter()
        .map(|i| {
            let mut rng = child_rng(seed, "session", i as u64);
            let picks = pick_sites(monitored, unmonitored, spec.world, spec.tabs, cfg, &mut rng)?;
            let tabs: Vec<Trace> = picks.iter().map(|m| sample_trace(m, &mut rng)).collect();
            let session = synthesize_session(&tabs, &mut rng, cfg, n_sites)?;
            Ok((session, tabs))
        })
        .collect::<Result<_, SynthError>>()?;
    let (sessions, sources) = built.into_iter().unzip();
    Ok(Dataset {
        n_sites,
        sessions,
        sources,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::rng_from_seed;

    fn toy_trace(label: SiteLabel, start: f64) -> Trace {
        let events = (0..10)
            .map(|i| {
                let d = if i % 3 == 0 {
                    Direction::Out
                } else {
                    Direction::In
                };
                PacketEvent::real(start + i as f64 * 0.5, d)
            })
            .collect();
        Trace::new(events, label).unwrap()
    }

    #[test]
    fn site_models_are_deterministic() {
        assert_eq!(generate_site_model(0, 42), generate_site_model(0, 42));
        assert_ne!(
            generate_site_model(0, 42).bursts,
            generate_site_model(1, 42).bursts
        );
        generate_site_model(3, 42).validate().unwrap();
    }

    #[test]
    fn hundred_sites_pairwise_distinct() {
        let plans: Vec<_> = (0..100).map(|i| generate_site_model(i, 7).bursts).collect();
        for i in 0..plans.len() {
            for j in i + 1..plans.len() {
                assert_ne!(plans[i], plans[j], "sites {i} and {j}");
            }
        }
    }

    #[test]
    fn sampling_is_deterministic_and_starts_at_zero() {
        let m = generate_site_model(5, 1);
        let a = sample_trace(&m, &mut rng_from_seed(9));
        let b = sample_trace(&m, &mut rng_from_seed(9));
        assert_eq!(a, b);
        assert_eq!(a.events()[0].time, 0.0);
        assert!(a.events().windows(2).all(|w| w[0].time <= w[1].time));
        assert_eq!(a.label, SiteLabel::Monitored(5));
    }

    #[test]
    fn burst_counts_match_configured_means() {
        // Bursts alternate direction, so each maximal run of the sampled
        // direction sequence is exactly one planned burst.
        let m = generate_site_model(11, 3);
        let mut totals = vec![0usize; m.bursts.len()];
        let mut rng = rng_from_seed(5);
        let n = 1000;
        for _ in 0..n {
            let t = sample_trace(&m, &mut rng);
            let mut run = 0usize;
            let mut prev: Option<Direction> = None;
            for d in t.directions() {
                if prev.is_some_and(|p| p != d) {
                    run += 1;
                }
                totals[run] += 1;
                prev = Some(d);
            }
            assert_eq!(run + 1, m.bursts.len());
        }
        for (b, total) in m.bursts.iter().zip(totals) {
            let mean = total as f64 / n as f64;
            assert!(
                (mean - b.mean_packets).abs() <= 0.05 * b.mean_packets,
                "observed {mean}, configured {}",
                b.mean_packets
            );
        }
    }

    #[test]
    fn merge_with_forced_offsets() {
        let a = toy_trace(SiteLabel::Monitored(1), 0.0);
        let b = toy_trace(SiteLabel::Monitored(3), 0.0);
        let s = merge_tabs(&[a.clone(), b.clone()], &[0.0, 5.0], 240.0, 4).unwrap();
        assert_eq!(s.trace.len(), 20);
        let mut expected: Vec<PacketEvent> = a.events().to_vec();
        expected.extend(b.events().iter().map(|e| PacketEvent {
            time: e.time + 5.0,
            ..*e
        }));
        expected.sort_by(|x, y| x.time.total_cmp(&y.time));
        assert_eq!(s.trace.events(), expected.as_slice());
        assert_eq!(s.labels.bits(), &[0, 1, 0, 1, 0]);
        assert_eq!(s.tab_count, 2);
        assert!(crate::trace::validate_session(&s, Some(4)).is_empty());
    }

    #[test]
    fn single_tab_is_identity() {
        let a = toy_trace(SiteLabel::Monitored(0), 0.0);
        let s = synthesize_session(
            std::slice::from_ref(&a),
            &mut rng_from_seed(77),
            &MixConfig::default(),
            2,
        )
        .unwrap();
        assert_eq!(s.trace.events(), a.events());
        assert_eq!(s.tab_offsets, vec![0.0]);
        assert_eq!(s.tab_count, 1);
    }

    #[test]
    fn cap_drops_late_events() {
        let a = toy_trace(SiteLabel::Monitored(0), 0.0);
        let late = Trace::new(
            vec![
                PacketEvent::real(0.0, Direction::Out),
                PacketEvent::real(239.0, Direction::In),
            ],
            SiteLabel::Monitored(1),
        )
        .unwrap();
        let s = merge_tabs(&[a, late], &[0.0, 5.0], 240.0, 2).unwrap();
        assert_eq!(s.trace.len(), 11);
        assert!(s.trace.events().iter().all(|e| e.time <= 240.0));
    }

    #[test]
    fn empty_merge_is_an_error() {
        assert_eq!(
            synthesize_session(&[], &mut rng_from_seed(0), &MixConfig::default(), 2),
            Err(SynthError::EmptyInput)
        );
    }

    #[test]
    fn duplicate_site_sets_label_once() {
        let a = toy_trace(SiteLabel::Monitored(1), 0.0);
        let s = merge_tabs(&[a.clone(), a], &[0.0, 4.0], 240.0, 3).unwrap();
        assert_eq!(s.labels.bits(), &[0, 1, 0, 0]);
    }

    #[test]
    fn closed_and_open_world_label_counts() {
        let mon: Vec<_> = (0..100).map(|i| generate_site_model(i, 1)).collect();
        let unm: Vec<_> = (0..10).map(|i| generate_unmonitored_model(i, 1)).collect();
        let cfg = MixConfig::default();
        let closed = build_dataset(
            &mon,
            &unm,
            &DatasetSpec {
                world: World::Closed,
                tabs: TabMode::Fixed(2),
                count: 50,
            },
            &cfg,
            3,
        )
        .unwrap();
        for s in &closed.sessions {
            assert_eq!(s.labels.monitored_count(), 2);
            assert!(!s.labels.unmonitored());
        }
        let open = build_dataset(
            &mon,
            &unm,
            &DatasetSpec {
                world: World::Open,
                tabs: TabMode::Fixed(3),
                count: 50,
            },
            &cfg,
            3,
        )
        .unwrap();
        for s in &open.sessions {
            assert_eq!(s.labels.monitored_count(), 2);
            assert!(s.labels.unmonitored());
        }
    }

    #[test]
    fn insufficient_sites() {
        let mon: Vec<_> = (0..2).map(|i| generate_site_model(i, 1)).collect();
        let err = build_dataset(
            &mon,
            &[],
            &DatasetSpec {
                world: World::Closed,
                tabs: TabMode::Fixed(3),
                count: 5,
            },
            &MixConfig::default(),
            3,
        )
        .unwrap_err();
        assert_eq!(
            err,
            SynthError::InsufficientSites {
                requested: 3,
                available: 2
            }
        );
    }

    #[test]
    fn same_seed_same_dataset() {
        let mon: Vec<_> = (0..5).map(|i| generate_site_model(i, 1)).collect();
        let spec = DatasetSpec {
            world: World::Closed,
            tabs: TabMode::Dynamic,
            count: 30,
        };
        let a = build_dataset(&mon, &[], &spec, &MixConfig::default(), 11).unwrap();
        let b = build_dataset(&mon, &[], &spec, &MixConfig::default(), 11).unwrap();
        assert_eq!(a, b);
        let c = build_dataset(&mon, &[], &spec, &MixConfig::default(), 12).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn mix_config_validation() {
        let mut cfg = MixConfig::default();
        cfg.dynamic_proportions.insert(6, 0.1);
        assert!(cfg.validate().is_err());
        let cfg = MixConfig {
            gap_range: (10.0, 3.0),
            ..MixConfig::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = MixConfig {
            session_cap: 0.0,
            ..MixConfig::default()
        };
        assert!(cfg.validate().is_err());
    }
}
