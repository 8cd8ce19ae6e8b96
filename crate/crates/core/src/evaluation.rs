//! Editing metrics and diagnostic profiles.
//!
//! Reliability, generality, and portability score greedy decodes against
//! their targets token by token. Locality scores the edited model's decode
//! against the base model's own pre-edit decode on probe prompts, captured
//! once per session before any parameters move.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::interventions::{gate_weights, InterventionParams, InterventionSet};
use crate::knowledge::KnowledgeItem;
use crate::numerics::dot;
use crate::tinylm::{HookSpec, TinyModel};

/// Extra decode budget past the expected target length; lets a derailed
/// model overshoot instead of silently truncating matches.
const DECODE_SLACK: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub rel: Option<f64>,
    pub gen: Option<f64>,
    pub loc: Option<f64>,
    pub por: Option<f64>,
    pub avg: f64,
}

impl Metrics {
    pub fn from_components(
        rel: Option<f64>,
        gen: Option<f64>,
        loc: Option<f64>,
        por: Option<f64>,
    ) -> Metrics {
        let present: Vec<f64> = [rel, gen, loc, por].into_iter().flatten().collect();
        let avg = if present.is_empty() {
            0.0
        } else {
            present.iter().sum::<f64>() / present.len() as f64
        };
        Metrics { rel, gen, loc, por, avg }
    }
}

/// Which metric components a protocol reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetricComponents {
    pub rel: bool,
    pub gen: bool,
    pub loc: bool,
    pub por: bool,
}

impl MetricComponents {
    /// Single editing reports all four metrics.
    pub fn single() -> Self {
        MetricComponents { rel: true, gen: true, loc: true, por: true }
    }

    /// Continual and batched editing report reliability, generality, and
    /// locality.
    pub fn continual() -> Self {
        MetricComponents { rel: true, gen: true, loc: true, por: false }
    }
}

/// Fraction of target tokens reproduced by greedy decoding, position by
/// position, truncated or padded to the target length.
pub fn token_match(
    model: &TinyModel,
    interventions: Option<(&InterventionSet, &HookSpec)>,
    prompt: &str,
    target: &str,
) -> Result<f64> {
    let prompt_ids = model.vocab.tokenize(prompt)?;
    let target_ids = model.vocab.tokenize(target)?;
    if target_ids.is_empty() {
        return Err(Error::InvalidArgument("token match needs a non-empty target".into()));
    }
    let decoded = model.greedy_decode(
        &prompt_ids,
        target_ids.len() + DECODE_SLACK,
        interventions,
        model.vocab.end_marker(),
    )?;
    Ok(fraction_matched(&decoded, &target_ids))
}

fn fraction_matched(decoded: &[usize], target: &[usize]) -> f64 {
    let hits = target
        .iter()
        .enumerate()
        .filter(|&(i, &t)| decoded.get(i) == Some(&t))
        .count();
    hits as f64 / target.len() as f64
}

/// Pre-edit greedy decodes of locality probe prompts, keyed by prompt text.
#[derive(Debug, Clone, Default)]
pub struct ProbeReferences {
    decodes: BTreeMap<String, Vec<usize>>,
}

impl ProbeReferences {
    pub fn get(&self, prompt: &str) -> Option<&[usize]> {
        self.decodes.get(prompt).map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.decodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.decodes.is_empty()
    }
}

/// Decodes every locality probe prompt of `items` with the unedited model.
/// Call once per session, before editing starts.
pub fn capture_probe_references(
    model: &TinyModel,
    items: &[KnowledgeItem],
) -> Result<ProbeReferences> {
    let mut refs = ProbeReferences::default();
    for item in items {
        for (prompt, expected) in &item.locality_probes {
            if refs.decodes.contains_key(prompt) {
                continue;
            }
            let prompt_ids = model.vocab.tokenize(prompt)?;
            let budget = model.vocab.tokenize(expected)?.len().max(1) + DECODE_SLACK;
            let decoded =
                model.greedy_decode(&prompt_ids, budget, None, model.vocab.end_marker())?;
            refs.decodes.insert(prompt.clone(), decoded);
        }
    }
    Ok(refs)
}

/// Scores the edited model over `items`. Locality compares post-edit decodes
/// on probe prompts against the pre-edit reference decodes.
pub fn evaluate(
    model: &TinyModel,
    interventions: Option<(&InterventionSet, &HookSpec)>,
    items: &[KnowledgeItem],
    references: &ProbeReferences,
    components: MetricComponents,
) -> Result<Metrics> {
    let mut rel_scores = Vec::new();
    let mut gen_scores = Vec::new();
    let mut loc_scores = Vec::new();
    let mut por_scores = Vec::new();

    for item in items {
        if components.rel {
            rel_scores.push(token_match(model, interventions, &item.prompt, &item.target)?);
        }
        if components.gen {
            for r in &item.rephrases {
                gen_scores.push(token_match(model, interventions, r, &item.target)?);
            }
        }
        if components.loc {
            for (prompt, expected) in &item.locality_probes {
                let reference = references.get(prompt).ok_or_else(|| {
                    Error::InvalidArgument(format!(
                        "no pre-edit reference decode for probe {prompt:?}"
                    ))
                })?;
                if reference.is_empty() {
                    continue;
                }
                let prompt_ids = model.vocab.tokenize(prompt)?;
                let budget = model.vocab.tokenize(expected)?.len().max(1) + DECODE_SLACK;
                let decoded = model.greedy_decode(
                    &prompt_ids,
                    budget,
                    interventions,
                    model.vocab.end_marker(),
                )?;
                loc_scores.push(fraction_matched(&decoded, reference));
            }
        }
        if components.por {
            for (prompt, target) in &item.portability_probes {
                por_scores.push(token_match(model, interventions, prompt, target)?);
            }
        }
    }

    let mean = |v: &[f64]| -> Option<f64> {
        if v.is_empty() {
            None
        } else {
            Some(v.iter().sum::<f64>() / v.len() as f64)
        }
    };
    Ok(Metrics::from_components(
        mean(&rel_scores),
        mean(&gen_scores),
        mean(&loc_scores),
        mean(&por_scores),
    ))
}

/// Redundant-dimension statistics for one threshold multiplier M: how many
/// bases contribute an update M times smaller than the strongest basis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RedundancyProfile {
    pub multiplier: f64,
    pub counts: Vec<usize>,
    pub mean: f64,
    pub min: usize,
    pub max: usize,
    /// Representations whose update vanished entirely; their count defaults
    /// to r−1 by convention.
    pub zero_updates: usize,
}

/// Per-basis update magnitude |w_k(h)·(a_k·h + b_k − r_k·h)|.
pub fn basis_update_magnitudes(params: &InterventionParams, h: &[f64]) -> Result<Vec<f64>> {
    let gates = gate_weights(params, h)?;
    Ok((0..params.rank)
        .map(|k| {
            let coeff = dot(params.predictor.row(k), h) + params.offset.data()[k]
                - dot(params.basis.row(k), h);
            (gates.w[k] * coeff).abs()
        })
        .collect())
}

/// Counts, per representation, the bases whose update magnitude falls below
/// max_j u_j / M.
pub fn redundancy_profile(
    params: &InterventionParams,
    representations: &[Vec<f64>],
    multiplier: f64,
) -> Result<RedundancyProfile> {
    if multiplier <= 1.0 {
        return Err(Error::InvalidArgument(format!(
            "threshold multiplier must exceed 1, got {multiplier}"
        )));
    }
    if representations.is_empty() {
        return Err(Error::InvalidArgument("no representations to profile".into()));
    }
    let mut counts = Vec::with_capacity(representations.len());
    let mut zero_updates = 0usize;
    for h in representations {
        let u = basis_update_magnitudes(params, h)?;
        let max = u.iter().cloned().fold(0.0f64, f64::max);
        if max == 0.0 {
            zero_updates += 1;
            counts.push(params.rank - 1);
            continue;
        }
        let threshold = max / multiplier;
        counts.push(u.iter().filter(|&&x| x < threshold).count());
    }
    let mean = counts.iter().sum::<usize>() as f64 / counts.len() as f64;
    let min = counts.iter().copied().min().unwrap_or(0);
    let max = counts.iter().copied().max().unwrap_or(0);
    Ok(RedundancyProfile { multiplier, counts, mean, min, max, zero_updates })
}

/// Mean gate weight per basis, grouped by prompt category.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightProfile {
    pub rows: Vec<WeightProfileRow>,
    /// Set when the gate mode is constant and the profile is trivially ones.
    pub constant_mode: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightProfileRow {
    pub category: String,
    pub layer: usize,
    pub mean_weights: Vec<f64>,
}

/// Runs each prompt through the intervened model, captures gate values at
/// the intervened positions, averages over positions per prompt, then over
/// prompts per category.
pub fn weight_profile(
    model: &TinyModel,
    set: &InterventionSet,
    hook: &HookSpec,
    categorized: &[(String, Vec<String>)],
) -> Result<WeightProfile> {
    hook.validate(model.config.layers)?;
    let constant_mode = set
        .by_layer
        .values()
        .all(|p| p.gate_mode == crate::interventions::GateMode::Constant);
    let mut rows = Vec::new();
    for (category, prompts) in categorized {
        let mut per_layer: BTreeMap<usize, (Vec<f64>, usize)> = BTreeMap::new();
        for prompt in prompts {
            let ids = model.vocab.tokenize(prompt)?;
            let fwd = model.forward(&ids, Some((set, hook, ids.len())))?;
            for (&layer, gates) in &fwd.gates {
                let rank = gates.cols();
                let entry = per_layer.entry(layer).or_insert_with(|| (vec![0.0; rank], 0));
                // Average over intervened positions first.
                for k in 0..rank {
                    let mut s = 0.0;
                    for p in 0..gates.rows() {
                        s += gates.at(p, k);
                    }
                    entry.0[k] += s / gates.rows() as f64;
                }
                entry.1 += 1;
            }
        }
        for (layer, (sums, n)) in per_layer {
            rows.push(WeightProfileRow {
                category: category.clone(),
                layer,
                mean_weights: sums.iter().map(|s| s / n as f64).collect(),
            });
        }
    }
    Ok(WeightProfile { rows, constant_mode })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::interventions::GateMode;
    use crate::numerics::{seeded_rng, Tensor};
    use crate::tinylm::{ModelConfig, Vocab};

    fn test_model() -> TinyModel {
        let cfg = ModelConfig { dim: 16, layers: 2, heads: 2, ffn_dim: 24, context: 48 };
        TinyModel::new(cfg, Vocab::default_charset(), 2024)
    }

    #[test]
    fn metrics_average_present_components() {
        let m = Metrics::from_components(Some(1.0), Some(0.5), Some(0.75), None);
        assert!((m.avg - 0.75).abs() < 1e-12);
        let m = Metrics::from_components(Some(1.0), None, None, None);
        assert!((m.avg - 1.0).abs() < 1e-12);
    }

    #[test]
    fn fraction_matched_cases() {
        assert_eq!(fraction_matched(&[1, 2, 3], &[1, 2, 3]), 1.0);
        assert_eq!(fraction_matched(&[9, 9, 9], &[1, 2, 3]), 0.0);
        // First 3 of 4 match; short decode pads as mismatch.
        assert_eq!(fraction_matched(&[1, 2, 3], &[1, 2, 3, 4]), 0.75);
        assert_eq!(fraction_matched(&[], &[1]), 0.0);
    }

    #[test]
    fn token_match_rejects_empty_target() {
        let model = test_model();
        assert!(token_match(&model, None, "ab", "").is_err());
    }

    #[test]
    fn locality_of_identity_interventions_is_exactly_one() {
        let model = test_model();
        let items = vec![KnowledgeItem {
            id: "x".into(),
            subject: "velor".into(),
            relation: "capital".into(),
            object_old: "tilma".into(),
            object_new: None,
            prompt: "the capital of velor is".into(),
            target: " tilma.".into(),
            rephrases: vec![],
            locality_probes: vec![("the capital of nuvia is".into(), " ressa.".into())],
            portability_probes: vec![],
        }];
        let refs = capture_probe_references(&model, &items).unwrap();
        let set = InterventionSet::identity_init(&[0, 1], 4, 16, GateMode::Constant, 1).unwrap();
        let hook = HookSpec::new(vec![0, 1], 3);
        let m = evaluate(
            &model,
            Some((&set, &hook)),
            &items,
            &refs,
            MetricComponents { rel: false, gen: false, loc: true, por: false },
        )
        .unwrap();
        assert_eq!(m.loc, Some(1.0));
        assert_eq!(m.avg, 1.0);
    }

    #[test]
    fn evaluation_is_order_invariant() {
        let model = test_model();
        let mk = |id: &str, subj: &str, probe: &str| KnowledgeItem {
            id: id.into(),
            subject: subj.into(),
            relation: "capital".into(),
            object_old: "aaa".into(),
            object_new: None,
            prompt: format!("the capital of {subj} is"),
            target: " aaa.".into(),
            rephrases: vec![format!("{subj} capital is")],
            locality_probes: vec![(probe.into(), " bbb.".into())],
            portability_probes: vec![],
        };
        let items =
            vec![mk("a", "velor", "money of kendo is"), mk("b", "nuvia", "ruler of parga is")];
        let refs = capture_probe_references(&model, &items).unwrap();
        let fwd = evaluate(&model, None, &items, &refs, MetricComponents::continual()).unwrap();
        let rev: Vec<KnowledgeItem> = items.iter().rev().cloned().collect();
        let bwd = evaluate(&model, None, &rev, &refs, MetricComponents::continual()).unwrap();
        assert_eq!(fwd, bwd);
    }

    fn profile_params() -> InterventionParams {
        InterventionParams {
            rank: 3,
            dim: 3,
            gate_mode: GateMode::Constant,
            basis: Tensor::from_rows(&[
                vec![1.0, 0.0, 0.0],
                vec![0.0, 1.0, 0.0],
                vec![0.0, 0.0, 1.0],
            ]),
            predictor: Tensor::zeros(vec![3, 3]),
            offset: Tensor::zeros(vec![3]),
            gate_w: None,
            gate_b: None,
        }
    }

    #[test]
    fn redundancy_hand_count() {
        // u = (3, 0.1, 0.5), M = 10 → threshold 0.3 → one basis below.
        let mut p = profile_params();
        p.predictor = p.basis.clone(); // makes each coefficient equal its offset
        p.offset = Tensor::vector(vec![3.0, 0.1, 0.5]);
        let reps = vec![vec![0.0, 0.0, 0.0]];
        let prof = redundancy_profile(&p, &reps, 10.0).unwrap();
        assert_eq!(prof.counts, vec![1]);
    }

    #[test]
    fn redundancy_equal_magnitudes_count_zero() {
        let mut p = profile_params();
        p.predictor = p.basis.clone();
        p.offset = Tensor::vector(vec![0.4, 0.4, 0.4]);
        let prof = redundancy_profile(&p, &[vec![0.0; 3]], 5.0).unwrap();
        assert_eq!(prof.counts, vec![0]);
    }

    #[test]
    fn redundancy_zero_update_flagged() {
        let mut p = profile_params();
        p.predictor = p.basis.clone();
        let prof = redundancy_profile(&p, &[vec![0.0; 3]], 2.0).unwrap();
        assert_eq!(prof.counts, vec![2]); // r − 1
        assert_eq!(prof.zero_updates, 1);
    }

    #[test]
    fn redundancy_matches_brute_force_and_is_monotone() {
        let mut rng = seeded_rng(404);
        let mut p = profile_params();
        p.predictor = Tensor::randn(vec![3, 3], 1.0, &mut rng);
        p.offset = Tensor::randn(vec![3], 1.0, &mut rng);
        let reps: Vec<Vec<f64>> =
            (0..50).map(|_| Tensor::randn(vec![3], 1.0, &mut rng).data().to_vec()).collect();
        let mut prev_mean = f64::INFINITY;
        for m in [1.5, 2.0, 5.0, 10.0] {
            let prof = redundancy_profile(&p, &reps, m).unwrap();
            // Brute force: recompute from scratch with scalar ops.
            for (i, h) in reps.iter().enumerate() {
                let u: Vec<f64> = (0..3)
                    .map(|k| {
                        let c = dot(p.predictor.row(k), h) + p.offset.data()[k]
                            - dot(p.basis.row(k), h);
                        c.abs()
                    })
                    .collect();
                let umax = u.iter().cloned().fold(0.0f64, f64::max);
                let mut n = 0;
                for &x in &u {
                    if x < umax / m {
                        n += 1;
                    }
                }
                assert_eq!(prof.counts[i], n, "rep {i} at M={m}");
            }
            // Larger M means a stricter threshold, so the count can only
            // shrink.
            assert!(prof.mean <= prev_mean, "count must be non-increasing in M");
            prev_mean = prof.mean;
        }
    }

    #[test]
    fn redundancy_rejects_bad_multiplier() {
        let p = profile_params();
        assert!(redundancy_profile(&p, &[vec![0.0; 3]], 1.0).is_err());
    }

    #[test]
    fn weight_profile_constant_mode_is_all_ones() {
        let model = test_model();
        let set = InterventionSet::identity_init(&[1], 4, 16, GateMode::Constant, 1).unwrap();
        let hook = HookSpec::new(vec![1], 3);
        let prof = weight_profile(
            &model,
            &set,
            &hook,
            &[("rel".into(), vec!["the capital of velor is".into()])],
        )
        .unwrap();
        assert!(prof.constant_mode);
        assert_eq!(prof.rows.len(), 1);
        assert!(prof.rows[0].mean_weights.iter().all(|&w| w == 1.0));
    }

    #[test]
    fn weight_profile_zero_gate_params_give_half() {
        let model = test_model();
        let set = InterventionSet::identity_init(&[0], 4, 16, GateMode::PerBasis, 1).unwrap();
        let hook = HookSpec::new(vec![0], 3);
        let prof = weight_profile(
            &model,
            &set,
            &hook,
            &[("loc".into(), vec!["money of kendo is".into(), "ruler of parga is".into()])],
        )
        .unwrap();
        assert!(!prof.constant_mode);
        for row in &prof.rows {
            for &w in &row.mean_weights {
                assert!((w - 0.5).abs() < 1e-12);
            }
        }
    }
}
