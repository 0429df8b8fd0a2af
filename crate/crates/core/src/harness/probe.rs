//! Runs the attention probes of a checkpoint over captioned scenes.

use std::collections::BTreeMap;

use vlground_numerics::{Graph, ParamStore};

use super::data::{probe_inputs, ProbeInput};
use crate::embeddings::Vocab;
use crate::encoder::Mode;
use crate::error::{Error, Result};
use crate::model::{Batch, VlModel};
use crate::probes::{
    baseline_csv_row, confidence_baseline, entity_grounding_accuracy, probe_csv_rows, syntactic_grounding_accuracy,
    syntactic_trials, BaselineItem, DependencyEdge, ProbeEntity, ProbeResult, PROBE_CSV_HEADER,
};
use crate::synthdata::{GroundedScene, RELATIONS};

const PROBE_BATCH: usize = 64;

/// Probe accuracies with the detection-confidence baseline over the same
/// trials.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeScore {
    pub result: ProbeResult,
    pub baseline: f64,
    pub n: usize,
}

impl ProbeScore {
    /// Best head accuracy minus the baseline.
    pub fn margin(&self) -> Option<f64> {
        self.result.best().map(|(_, _, a)| a - self.baseline)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeSummary {
    pub entity: ProbeScore,
    pub relations: BTreeMap<String, ProbeScore>,
}

impl ProbeSummary {
    pub fn to_csv(&self) -> String {
        let mut s = format!("{PROBE_CSV_HEADER}\n");
        s.push_str(&probe_csv_rows("entity", "", &self.entity.result));
        s.push_str(&baseline_csv_row("entity", self.entity.baseline, self.entity.n));
        for (label, score) in &self.relations {
            s.push_str(&probe_csv_rows("syntactic", label, &score.result));
            s.push_str(&baseline_csv_row(label, score.baseline, score.n));
        }
        s
    }
}

/// Per-caption probe inputs in slot coordinates, with their gold sets in
/// region indices for the baseline.
struct CaptionProbe {
    entities: Vec<ProbeEntity>,
    entity_gold: Vec<Vec<usize>>,
    edges: Vec<DependencyEdge>,
    slot_gold: BTreeMap<usize, Vec<usize>>,
    relation_gold: Vec<(String, Vec<usize>)>,
}

fn caption_probe(scene: &GroundedScene, input: &ProbeInput) -> CaptionProbe {
    let caption = &scene.captions[input.caption];
    let seq = &input.seq;
    let word_slot = |w: usize| seq.word_positions.get(w).copied();
    let region_slots = |rs: &[usize]| -> Vec<usize> { rs.iter().map(|&r| seq.region_slot(r)).collect() };
    let mut entities = Vec::new();
    let mut entity_gold = Vec::new();
    for e in &caption.entities {
        if let Some(q) = word_slot(e.end) {
            entities.push(ProbeEntity {
                query: q,
                gold: region_slots(&e.regions),
            });
            entity_gold.push(e.regions.clone());
        }
    }
    let word_gold = caption.word_regions();
    let edges: Vec<DependencyEdge> = caption
        .edges
        .iter()
        .filter(|e| RELATIONS.contains(&e.label.as_str()))
        .filter_map(|e| {
            Some(DependencyEdge {
                head: word_slot(e.head)?,
                dep: word_slot(e.dep)?,
                label: e.label.clone(),
            })
        })
        .collect();
    let slot_gold = word_gold
        .iter()
        .filter_map(|(&w, rs)| Some((word_slot(w)?, region_slots(rs))))
        .collect();
    let word_edges: Vec<DependencyEdge> = caption
        .edges
        .iter()
        .filter(|e| word_slot(e.head).is_some() && word_slot(e.dep).is_some())
        .cloned()
        .collect();
    let (trials, _) = syntactic_trials(&word_edges, &word_gold, Some(&RELATIONS[..]));
    CaptionProbe {
        entities,
        entity_gold,
        edges,
        slot_gold,
        relation_gold: trials.into_iter().map(|t| (t.label, t.gold)).collect(),
    }
}

fn merge_into(total: &mut Option<ProbeResult>, part: &ProbeResult) -> Result<()> {
    match total {
        Some(t) => t.merge(part),
        None => {
            *total = Some(part.clone());
            Ok(())
        }
    }
}

/// Entity and syntactic probes of every caption of the first `limit` scenes
/// (all when 0), input as `[CLS] caption [SEP] regions` without alignment.
pub fn run_probes(
    model: &VlModel,
    store: &ParamStore<f32>,
    scenes: &[GroundedScene],
    vocab: &Vocab,
    limit: usize,
) -> Result<ProbeSummary> {
    let config = model.config;
    let inputs = probe_inputs(scenes, vocab, config.encoder.max_len, limit)?;
    if inputs.is_empty() {
        return Err(Error::InvalidDataset("no captions to probe".into()));
    }
    let mut entity: Option<ProbeResult> = None;
    let mut relations: BTreeMap<String, Option<ProbeResult>> = BTreeMap::new();
    let mut entity_items: Vec<(Vec<usize>, usize)> = Vec::new();
    let mut relation_items: BTreeMap<String, Vec<(Vec<usize>, usize)>> = BTreeMap::new();
    for chunk in inputs.chunks(PROBE_BATCH) {
        let batch = Batch::new(chunk.iter().map(|p| p.seq.clone()).collect())?;
        let mut g = Graph::<f32>::new();
        let fwd = model.forward(&mut g, store, &batch, &mut Mode::Eval)?;
        let records = fwd.records(&g, &batch, config.encoder.heads);
        for (input, record) in chunk.iter().zip(&records) {
            let probe = caption_probe(&scenes[input.scene], input);
            if !probe.entities.is_empty() {
                let r = entity_grounding_accuracy(record, &probe.entities, &input.seq.modality)?;
                merge_into(&mut entity, &r)?;
            }
            let per = syntactic_grounding_accuracy(record, &probe.edges, &probe.slot_gold, &input.seq.modality, Some(&RELATIONS[..]))?;
            for (label, r) in per {
                merge_into(relations.entry(label).or_default(), &r)?;
            }
            entity_items.extend(probe.entity_gold.into_iter().map(|g| (g, input.scene)));
            for (label, g) in probe.relation_gold {
                relation_items.entry(label).or_default().push((g, input.scene));
            }
        }
    }
    let score = |result: ProbeResult, items: &[(Vec<usize>, usize)]| -> Result<ProbeScore> {
        let confidences: Vec<Vec<f32>> = items
            .iter()
            .map(|(_, s)| scenes[*s].regions.iter().map(|r| r.region.confidence).collect())
            .collect();
        let baseline_items: Vec<BaselineItem<'_>> = items
            .iter()
            .zip(&confidences)
            .map(|((g, _), c)| BaselineItem { gold: g, confidences: c })
            .collect();
        let n = baseline_items.iter().filter(|b| !b.gold.is_empty()).count();
        Ok(ProbeScore {
            baseline: confidence_baseline(&baseline_items).unwrap_or(0.0),
            n,
            result,
        })
    };
    let heads = config.encoder.heads;
    let layers = config.encoder.layers;
    let entity = entity.ok_or_else(|| Error::InvalidDataset("no annotated entities".into()))?;
    let entity = score(entity, &entity_items)?;
    let mut out = BTreeMap::new();
    for label in RELATIONS {
        let result = relations
            .remove(label)
            .flatten()
            .unwrap_or_else(|| ProbeResult::new(layers, heads));
        let items = relation_items.remove(label).unwrap_or_default();
        out.insert(label.to_string(), score(result, &items)?);
    }
    Ok(ProbeSummary { entity, relations: out })
}
