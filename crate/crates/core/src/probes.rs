//! Attention probes: per-head entity grounding, syntactic grounding, head
//! activity, and the detection-confidence baseline.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::embeddings::Modality;
use crate::encoder::AttentionRecord;
use crate::error::{Error, Result};

/// Heads whose mean attention mass on regions falls below this are flagged
/// as weakly attending. Flagged heads are still scored.
pub const ACTIVITY_THRESHOLD: f64 = 0.2;

/// `head -> dep` with a relation label; positions are word or slot indices.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DependencyEdge {
    pub head: usize,
    pub dep: usize,
    pub label: String,
}

/// A query slot and the region slots that count as correct from it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProbeEntity {
    pub query: usize,
    pub gold: Vec<usize>,
}

/// Hit and mass tallies per (layer, head).
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeResult {
    pub layers: usize,
    pub heads: usize,
    pub hits: Vec<usize>,
    pub counts: Vec<usize>,
    pub region_mass: Vec<f64>,
    pub skipped: usize,
}

impl ProbeResult {
    pub fn new(layers: usize, heads: usize) -> Self {
        ProbeResult {
            layers,
            heads,
            hits: vec![0; layers * heads],
            counts: vec![0; layers * heads],
            region_mass: vec![0.0; layers * heads],
            skipped: 0,
        }
    }

    fn idx(&self, layer: usize, head: usize) -> usize {
        layer * self.heads + head
    }

    pub fn n(&self, layer: usize, head: usize) -> usize {
        self.counts[self.idx(layer, head)]
    }

    pub fn accuracy(&self, layer: usize, head: usize) -> Option<f64> {
        let i = self.idx(layer, head);
        (self.counts[i] > 0).then(|| self.hits[i] as f64 / self.counts[i] as f64)
    }

    pub fn mean_region_mass(&self, layer: usize, head: usize) -> Option<f64> {
        let i = self.idx(layer, head);
        (self.counts[i] > 0).then(|| self.region_mass[i] / self.counts[i] as f64)
    }

    pub fn is_active(&self, layer: usize, head: usize) -> bool {
        self.mean_region_mass(layer, head).is_some_and(|m| m >= ACTIVITY_THRESHOLD)
    }

    pub fn is_empty(&self) -> bool {
        self.counts.iter().all(|&c| c == 0)
    }

    /// Adds another result's tallies into this one.
    pub fn merge(&mut self, other: &ProbeResult) -> Result<()> {
        if (self.layers, self.heads) != (other.layers, other.heads) {
            return Err(Error::Input("probe results of different shapes".into()));
        }
        for i in 0..self.hits.len() {
            self.hits[i] += other.hits[i];
            self.counts[i] += other.counts[i];
            self.region_mass[i] += other.region_mass[i];
        }
        self.skipped += other.skipped;
        Ok(())
    }

    /// Best (layer, head, accuracy), earliest cell on ties.
    pub fn best(&self) -> Option<(usize, usize, f64)> {
        let mut best: Option<(usize, usize, f64)> = None;
        for l in 0..self.layers {
            for h in 0..self.heads {
                if let Some(a) = self.accuracy(l, h) {
                    if best.is_none_or(|b| a > b.2) {
                        best = Some((l, h, a));
                    }
                }
            }
        }
        best
    }

    /// Highest head accuracy within each layer.
    pub fn layer_max(&self) -> Vec<f64> {
        (0..self.layers)
            .map(|l| {
                (0..self.heads)
                    .filter_map(|h| self.accuracy(l, h))
                    .fold(0.0, f64::max)
            })
            .collect()
    }

    fn record(&mut self, layer: usize, head: usize, hit: bool, mass: f64) {
        let i = self.idx(layer, head);
        self.counts[i] += 1;
        self.hits[i] += hit as usize;
        self.region_mass[i] += mass;
    }
}

/// Slot of the largest value among `slots`, lowest slot on ties.
fn masked_argmax(row: &[f32], slots: &[usize]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for &s in slots {
        if best.is_none_or(|b| row[s] > row[b]) {
            best = Some(s);
        }
    }
    best
}

fn region_slots(modality: &[Modality]) -> Vec<usize> {
    modality
        .iter()
        .enumerate()
        .filter(|(_, m)| **m == Modality::Region)
        .map(|(i, _)| i)
        .collect()
}

fn check_shape(record: &AttentionRecord, modality: &[Modality]) -> Result<()> {
    if record.len != modality.len() {
        return Err(Error::Input(format!(
            "attention covers {} slots, modality mask {}",
            record.len,
            modality.len()
        )));
    }
    Ok(())
}

fn score_trial(result: &mut ProbeResult, record: &AttentionRecord, regions: &[usize], query: usize, gold: &[usize]) {
    for l in 0..record.layers {
        for h in 0..record.heads {
            let row = record.row(l, h, query);
            let pick = masked_argmax(row, regions).expect("regions present");
            let mass: f64 = regions.iter().map(|&s| row[s] as f64).sum();
            result.record(l, h, gold.contains(&pick), mass);
        }
    }
}

/// For each head and entity: keep only the attention from the entity's query
/// slot to region slots, take the argmax, and count a hit when it is gold.
/// Entities without gold regions are skipped and tallied.
pub fn entity_grounding_accuracy(
    record: &AttentionRecord,
    entities: &[ProbeEntity],
    modality: &[Modality],
) -> Result<ProbeResult> {
    check_shape(record, modality)?;
    if entities.is_empty() {
        return Err(Error::Input("no annotated entities".into()));
    }
    let regions = region_slots(modality);
    let mut result = ProbeResult::new(record.layers, record.heads);
    for e in entities {
        if e.query >= record.len || e.gold.iter().any(|&g| g >= record.len) {
            return Err(Error::Span(format!("entity slot outside sequence of {}", record.len)));
        }
        if e.gold.is_empty() || regions.is_empty() {
            result.skipped += 1;
            continue;
        }
        score_trial(&mut result, record, &regions, e.query, &e.gold);
    }
    Ok(result)
}

/// One probe trial: the query slot, the gold region slots, and the relation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SyntacticTrial {
    pub label: String,
    pub query: usize,
    pub gold: Vec<usize>,
}

/// Expands edges into trials: from `dep` to the regions of `head` when
/// `head` is grounded, and from `head` to the regions of `dep` when `dep` is.
/// Returns the trials and the number of edges with no grounded endpoint.
pub fn syntactic_trials(
    edges: &[DependencyEdge],
    gold: &BTreeMap<usize, Vec<usize>>,
    filter: Option<&[&str]>,
) -> (Vec<SyntacticTrial>, BTreeMap<String, usize>) {
    let mut trials = Vec::new();
    let mut skipped: BTreeMap<String, usize> = BTreeMap::new();
    for e in edges {
        if filter.is_some_and(|f| !f.contains(&e.label.as_str())) {
            continue;
        }
        let head_gold = gold.get(&e.head).filter(|g| !g.is_empty());
        let dep_gold = gold.get(&e.dep).filter(|g| !g.is_empty());
        if head_gold.is_none() && dep_gold.is_none() {
            *skipped.entry(e.label.clone()).or_default() += 1;
        }
        if let Some(g) = head_gold {
            trials.push(SyntacticTrial {
                label: e.label.clone(),
                query: e.dep,
                gold: g.clone(),
            });
        }
        if let Some(g) = dep_gold {
            trials.push(SyntacticTrial {
                label: e.label.clone(),
                query: e.head,
                gold: g.clone(),
            });
        }
    }
    (trials, skipped)
}

/// Per-relation head accuracies for attention from one endpoint of an edge
/// to the gold regions of the other. With a filter, every filtered label gets
/// an entry even when no edge carries it.
pub fn syntactic_grounding_accuracy(
    record: &AttentionRecord,
    edges: &[DependencyEdge],
    gold: &BTreeMap<usize, Vec<usize>>,
    modality: &[Modality],
    filter: Option<&[&str]>,
) -> Result<BTreeMap<String, ProbeResult>> {
    check_shape(record, modality)?;
    for e in edges {
        if e.head >= record.len || e.dep >= record.len || e.head == e.dep {
            return Err(Error::Span(format!("edge {e:?} invalid for sequence of {}", record.len)));
        }
    }
    let regions = region_slots(modality);
    let mut out: BTreeMap<String, ProbeResult> = BTreeMap::new();
    for label in filter.into_iter().flatten() {
        out.insert(label.to_string(), ProbeResult::new(record.layers, record.heads));
    }
    let (trials, skipped) = syntactic_trials(edges, gold, filter);
    for (label, n) in skipped {
        out.entry(label)
            .or_insert_with(|| ProbeResult::new(record.layers, record.heads))
            .skipped += n;
    }
    for t in trials {
        let r = out
            .entry(t.label.clone())
            .or_insert_with(|| ProbeResult::new(record.layers, record.heads));
        if regions.is_empty() {
            r.skipped += 1;
            continue;
        }
        score_trial(r, record, &regions, t.query, &t.gold);
    }
    Ok(out)
}

/// A gold set and the confidences of the regions it indexes.
#[derive(Debug, Clone, Copy)]
pub struct BaselineItem<'a> {
    pub gold: &'a [usize],
    pub confidences: &'a [f32],
}

/// Index of the most confident region, lowest index on ties.
pub fn most_confident(confidences: &[f32]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &c) in confidences.iter().enumerate() {
        if best.is_none_or(|b| c > confidences[b]) {
            best = Some(i);
        }
    }
    best
}

/// Fraction of items whose gold set contains the most confident region.
/// Items with an empty gold set or no regions are left out.
pub fn confidence_baseline(items: &[BaselineItem<'_>]) -> Option<f64> {
    let (mut hits, mut n) = (0usize, 0usize);
    for it in items {
        let Some(top) = most_confident(it.confidences) else { continue };
        if it.gold.is_empty() {
            continue;
        }
        n += 1;
        hits += it.gold.contains(&top) as usize;
    }
    (n > 0).then(|| hits as f64 / n as f64)
}

pub const PROBE_CSV_HEADER: &str = "probe,relation,layer,head,accuracy,mean_region_mass,n";

/// CSV rows for one probe result; layers and heads are numbered from 1.
pub fn probe_csv_rows(probe: &str, relation: &str, result: &ProbeResult) -> String {
    let mut s = String::new();
    for l in 0..result.layers {
        for h in 0..result.heads {
            let n = result.n(l, h);
            let acc = result.accuracy(l, h).map_or(String::new(), |a| format!("{a:.6}"));
            let mass = result.mean_region_mass(l, h).map_or(String::new(), |m| format!("{m:.6}"));
            let _ = writeln!(s, "{probe},{relation},{},{},{acc},{mass},{n}", l + 1, h + 1);
        }
    }
    s
}

pub fn baseline_csv_row(relation: &str, accuracy: f64, n: usize) -> String {
    format!("baseline,{relation},,,{accuracy:.6},,{n}\n")
}
