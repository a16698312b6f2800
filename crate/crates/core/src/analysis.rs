//! Entity-variance diagnostics: per-example mean `sigma²`, variance bins,
//! variance-sorted F1 curves and occlusion attribution.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::LabelSet;
use crate::error::{Error, Result};
use crate::evaluation::{micro_f1, PredictionRecord};
use crate::io::write_string;
use crate::model::{Batch, MarkedExample, ModelState};
use crate::tensor::Tensor;
use crate::vib::EntityMask;

/// Variance bins have width `1 / BINS_PER_UNIT`.
pub const BINS_PER_UNIT: f64 = 10.0;

/// Mean of `sigma²` over entity rows and all dimensions.
pub fn mean_entity_variance(sigma: &Tensor, mask: &EntityMask) -> Result<f64> {
    if mask.len() != sigma.rows() {
        return Err(Error::Dimension {
            op: "mean_entity_variance",
            lhs: sigma.shape().to_vec(),
            rhs: vec![mask.len()],
        });
    }
    let n = mask.count();
    if n == 0 {
        return Err(Error::UndefinedVariance("no entity tokens".into()));
    }
    let sum: f64 = mask
        .flags()
        .iter()
        .enumerate()
        .filter(|(_, &m)| m)
        .flat_map(|(i, _)| sigma.row(i).iter().map(|s| s * s))
        .sum();
    Ok(sum / (n * sigma.cols()) as f64)
}

fn variance_of(r: &PredictionRecord) -> Result<f64> {
    r.mean_entity_variance
        .ok_or_else(|| Error::UndefinedVariance(format!("record {} has no variance", r.example_id)))
}

pub fn bin_index(variance: f64) -> usize {
    // Multiplying keeps exact decimals such as 0.3 on their own bin edge,
    // where dividing by 0.1 would not.
    (variance * BINS_PER_UNIT).floor() as usize
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelationCount {
    pub relation: String,
    pub correct: usize,
    pub gold: usize,
}

/// Half-open interval `[lower, upper)` of mean entity variance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VarianceBin {
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
    pub proportion: f64,
    pub relations: Vec<RelationCount>,
    /// Up to three relations with the most correct predictions.
    pub dominant: Vec<RelationCount>,
}

/// Consecutive bins from the lowest to the highest occupied one.
pub fn variance_bins(records: &[PredictionRecord]) -> Result<Vec<VarianceBin>> {
    let mut by_bin: BTreeMap<usize, Vec<&PredictionRecord>> = BTreeMap::new();
    for r in records {
        let v = variance_of(r)?;
        if !(v >= 0.0 && v.is_finite()) {
            return Err(Error::Domain(format!("record {} has variance {v}", r.example_id)));
        }
        by_bin.entry(bin_index(v)).or_default().push(r);
    }
    let (Some(&lo), Some(&hi)) = (by_bin.keys().next(), by_bin.keys().next_back()) else {
        return Ok(Vec::new());
    };
    let total = records.len() as f64;
    Ok((lo..=hi)
        .map(|k| {
            let members = by_bin.get(&k).map(Vec::as_slice).unwrap_or(&[]);
            let mut counts: BTreeMap<&str, RelationCount> = BTreeMap::new();
            for r in members {
                let c = counts.entry(&r.gold).or_insert_with(|| RelationCount {
                    relation: r.gold.clone(),
                    correct: 0,
                    gold: 0,
                });
                c.gold += 1;
                c.correct += usize::from(r.gold == r.predicted);
            }
            let mut relations: Vec<RelationCount> = counts.into_values().collect();
            relations.sort_by(|a, b| b.gold.cmp(&a.gold).then_with(|| a.relation.cmp(&b.relation)));
            let mut dominant = relations.clone();
            dominant.sort_by(|a, b| b.correct.cmp(&a.correct).then_with(|| a.relation.cmp(&b.relation)));
            dominant.truncate(3);
            VarianceBin {
                lower: k as f64 / BINS_PER_UNIT,
                upper: (k + 1) as f64 / BINS_PER_UNIT,
                count: members.len(),
                proportion: members.len() as f64 / total,
                relations,
                dominant,
            }
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub percent: u32,
    pub size: usize,
    pub micro_f1: f64,
}

/// Micro-F1 on the top-`p`% highest-variance records for each `p`. The
/// cut keeps every record tied with the last one admitted.
pub fn variance_sorted_f1(
    records: &[PredictionRecord],
    percentages: &[u32],
    labels: &LabelSet,
) -> Result<Vec<CurvePoint>> {
    if let Some(p) = percentages.iter().find(|&&p| p == 0 || p > 100 || p % 10 != 0) {
        return Err(Error::Contract(format!("percentage {p} not in {{10, 20, …, 100}}")));
    }
    let mut sorted: Vec<(f64, &PredictionRecord)> =
        records.iter().map(|r| Ok((variance_of(r)?, r))).collect::<Result<_>>()?;
    sorted.sort_by(|a, b| b.0.total_cmp(&a.0));
    let n = sorted.len();
    percentages
        .iter()
        .map(|&p| {
            let mut k = (p as usize * n).div_ceil(100);
            if k == 0 {
                return Err(Error::Contract("variance_sorted_f1 needs at least one record".into()));
            }
            let cut = sorted[k - 1].0;
            while k < n && sorted[k].0 == cut {
                k += 1;
            }
            let subset: Vec<PredictionRecord> = sorted[..k].iter().map(|(_, r)| (*r).clone()).collect();
            Ok(CurvePoint {
                percent: p,
                size: k,
                micro_f1: micro_f1(&subset, labels)?,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributionResult {
    pub example_id: String,
    pub tokens: Vec<String>,
    /// Drop of the gold-relation logit when the token is occluded; 0 on
    /// markers.
    pub scores: Vec<f64>,
    pub gold: String,
    pub predicted: String,
    pub mean_entity_variance: Option<f64>,
}

/// Gold-relation logit of each sequence in `batch`.
pub(crate) fn gold_logits(state: &ModelState, batch: &Batch, gold: usize) -> Result<Vec<f64>> {
    Ok(state.infer_batch(batch)?.into_iter().map(|i| i.logits[gold]).collect())
}

/// Zero-embedding occlusion of every non-marker token, one copy of the
/// sequence per occluded position, all in a single batch.
pub fn occlusion_attribution(state: &ModelState, ex: &MarkedExample, gold: usize) -> Result<AttributionResult> {
    if gold >= state.labels.len() {
        return Err(Error::Label(format!("gold id {gold} out of range")));
    }
    let full = state.infer(std::slice::from_ref(ex), 1)?.remove(0);
    let positions: Vec<usize> = (0..ex.len()).filter(|t| !ex.markers.contains(t)).collect();
    let mut scores = vec![0.0; ex.len()];
    if !positions.is_empty() {
        let copies: Vec<&MarkedExample> = positions.iter().map(|_| ex).collect();
        let mut batch = Batch::new(&copies);
        for (copy, &t) in positions.iter().enumerate() {
            batch.occluded[batch.segments[copy].start + t] = true;
        }
        let occluded = gold_logits(state, &batch, gold)?;
        for (&t, o) in positions.iter().zip(occluded) {
            scores[t] = full.logits[gold] - o;
        }
    }
    Ok(AttributionResult {
        example_id: ex.id.clone(),
        tokens: ex.tokens.clone(),
        scores,
        gold: state.labels.name(gold).to_string(),
        predicted: state.labels.name(full.predicted).to_string(),
        mean_entity_variance: full.mean_entity_variance,
    })
}

#[derive(Serialize)]
struct BinRow<'a> {
    lower: f64,
    upper: f64,
    count: usize,
    proportion: f64,
    dominant: String,
    relations: &'a str,
}

fn fmt_counts(cs: &[RelationCount]) -> String {
    cs.iter()
        .map(|c| format!("{} ({}/{})", c.relation, c.correct, c.gold))
        .collect::<Vec<_>>()
        .join("; ")
}

pub fn write_bins_csv(path: &Path, bins: &[VarianceBin]) -> Result<()> {
    let rel: Vec<String> = bins.iter().map(|b| fmt_counts(&b.relations)).collect();
    let rows: Vec<BinRow> = bins
        .iter()
        .zip(&rel)
        .map(|(b, r)| BinRow {
            lower: b.lower,
            upper: b.upper,
            count: b.count,
            proportion: b.proportion,
            dominant: fmt_counts(&b.dominant),
            relations: r,
        })
        .collect();
    crate::evaluation::write_csv(path, &rows)
}

/// `x`/`y` series for external plotting tools.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlotSeries {
    pub name: String,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
}

pub fn write_plot_data(path: &Path, series: &[PlotSeries]) -> Result<()> {
    write_string(path, &serde_json::to_string_pretty(&serde_json::json!({ "series": series }))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use proptest::prelude::*;
    use rand::Rng;

    fn rec(id: usize, var: f64, gold: &str, pred: &str) -> PredictionRecord {
        PredictionRecord {
            example_id: id.to_string(),
            gold: gold.into(),
            predicted: pred.into(),
            logits: vec![],
            mean_entity_variance: Some(var),
        }
    }

    #[test]
    fn mean_variance_examples() {
        let ones = Tensor::ones(&[3, 4]);
        let m = EntityMask::new(vec![true, false, true]);
        assert_eq!(mean_entity_variance(&ones, &m).unwrap(), 1.0);
        let s = Tensor::new(vec![3, 1], vec![1.0, 7.0, 2.0]).unwrap();
        assert_eq!(mean_entity_variance(&s, &m).unwrap(), 2.5);
        let empty = EntityMask::new(vec![false; 3]);
        assert!(matches!(mean_entity_variance(&s, &empty), Err(Error::UndefinedVariance(_))));
    }

    #[test]
    fn identical_variances_share_one_bin() {
        let rs: Vec<_> = (0..7).map(|i| rec(i, 0.43, "no_relation", "no_relation")).collect();
        let bins = variance_bins(&rs).unwrap();
        assert_eq!(bins.len(), 1);
        assert_eq!(bins[0].proportion, 1.0);
        assert!((bins[0].lower - 0.4).abs() < 1e-12);
    }

    #[test]
    fn empty_bins_inside_range_are_kept() {
        let rs = [rec(0, 0.05, "no_relation", "no_relation"), rec(1, 0.35, "no_relation", "no_relation")];
        let bins = variance_bins(&rs).unwrap();
        assert_eq!(bins.iter().map(|b| b.count).collect::<Vec<_>>(), [1, 0, 0, 1]);
    }

    #[test]
    fn flat_curve_on_ties() {
        let labels = LabelSet::default();
        let r1 = "org:gpe:headquartered_in";
        let rs: Vec<_> = (0..10)
            .map(|i| rec(i, 0.2, r1, if i % 3 == 0 { "no_relation" } else { r1 }))
            .collect();
        let full = micro_f1(&rs, &labels).unwrap();
        let pcts: Vec<u32> = (1..=10).map(|p| p * 10).collect();
        for pt in variance_sorted_f1(&rs, &pcts, &labels).unwrap() {
            assert_eq!(pt.micro_f1, full);
            assert_eq!(pt.size, 10);
        }
        assert!(variance_sorted_f1(&rs, &[15], &labels).is_err());
    }

    const LABELS: [&str; 4] = [
        "no_relation",
        "org:gpe:headquartered_in",
        "pers:title:title",
        "org:org:subsidiary_of",
    ];

    fn records() -> impl Strategy<Value = Vec<PredictionRecord>> {
        prop::collection::vec((0.0f64..2.5, 0usize..4, 0usize..4), 1..60).prop_map(|xs| {
            xs.into_iter()
                .enumerate()
                .map(|(i, (v, g, p))| rec(i, v, LABELS[g], LABELS[p]))
                .collect()
        })
    }

    #[test]
    fn decimal_edges_open_their_bin() {
        assert_eq!(bin_index(0.3), 3);
        assert_eq!(bin_index(0.7), 7);
        assert_eq!(bin_index(0.0999999), 0);
        assert_eq!(bin_index(1.0), 10);
    }

    #[test]
    fn curve_at_half_matches_sort_oracle() {
        let labels = LabelSet::default();
        let mut rng = stream(4, "curve");
        let rs: Vec<_> = (0..37)
            .map(|i| {
                let g = LABELS[rng.random_range(0..4)];
                let p = if rng.random_bool(0.6) { g } else { LABELS[rng.random_range(0..4)] };
                rec(i, rng.random::<f64>(), g, p)
            })
            .collect();
        let mut sorted = rs.clone();
        sorted.sort_by(|a, b| b.mean_entity_variance.partial_cmp(&a.mean_entity_variance).unwrap());
        let top = &sorted[..19];
        let pts = variance_sorted_f1(&rs, &[50, 100], &labels).unwrap();
        assert_eq!(pts[0].size, 19);
        assert_eq!(pts[0].micro_f1, micro_f1(top, &labels).unwrap());
        assert_eq!(pts[1].micro_f1, micro_f1(&rs, &labels).unwrap());
    }

    fn tiny_model() -> (ModelState, Vec<MarkedExample>) {
        use crate::corpus::{EntityType, Example};
        use crate::model::{ModelConfig, Vocabulary};
        let mk = |id: &str, text: &str, subj: [usize; 2], obj: [usize; 2]| Example {
            id: id.into(),
            tokens: text.split(' ').map(String::from).collect(),
            subj_span: subj,
            obj_span: obj,
            subj_type: EntityType::Org,
            obj_type: EntityType::Gpe,
            relation: "org:gpe:operations_in".into(),
        };
        let exs = [
            mk("a", "Zorba Labs expanded the plants of Kelvo City .", [0, 1], [6, 7]),
            mk("b", "Kelvo said Drak Corp had deployed its outlets .", [2, 3], [0, 0]),
        ];
        let cfg = ModelConfig {
            d_model: 8,
            n_layers: 2,
            n_heads: 2,
            ffn_width: 16,
            max_sequence_length: 16,
            embedding_std: 0.5,
            ..Default::default()
        };
        let state = ModelState::init(cfg, Vocabulary::build(&exs), LabelSet::default(), true).unwrap();
        let marked = exs.iter().map(|e| state.mark(e).unwrap()).collect();
        (state, marked)
    }

    #[test]
    fn occlusion_matches_one_position_at_a_time() {
        let (state, marked) = tiny_model();
        let gold = state.labels.id("org:gpe:operations_in").unwrap();
        for ex in &marked {
            let res = occlusion_attribution(&state, ex, gold).unwrap();
            let base = state.infer(std::slice::from_ref(ex), 1).unwrap()[0].logits[gold];
            for t in 0..ex.len() {
                if ex.markers.contains(&t) {
                    assert_eq!(res.scores[t], 0.0);
                    continue;
                }
                let mut batch = Batch::new(&[ex]);
                batch.occluded[t] = true;
                let o = gold_logits(&state, &batch, gold).unwrap()[0];
                assert!((res.scores[t] - (base - o)).abs() < 1e-10, "position {t}");
            }
            assert!(res.scores.iter().any(|s| *s != 0.0));
            assert_eq!(res.tokens, ex.tokens);
            assert!(res.mean_entity_variance.is_some());
        }
        assert!(occlusion_attribution(&state, &marked[0], 99).is_err());
    }

    proptest! {
        #[test]
        fn bins_match_floor_oracle(rs in records()) {
            let bins = variance_bins(&rs).unwrap();
            let total: f64 = bins.iter().map(|b| b.proportion).sum();
            prop_assert!((total - 1.0).abs() < 1e-9);
            prop_assert_eq!(bins.iter().map(|b| b.count).sum::<usize>(), rs.len());
            let lo = rs.iter().map(|r| (r.mean_entity_variance.unwrap() * 10.0).floor() as usize).min().unwrap();
            for r in &rs {
                let k = (r.mean_entity_variance.unwrap() * 10.0).floor() as usize;
                let bin = &bins[k - lo];
                prop_assert!((bin.lower - k as f64 / 10.0).abs() < 1e-12);
                prop_assert!(bin.relations.iter().any(|c| c.relation == r.gold));
            }
            for b in &bins {
                prop_assert!(b.relations.iter().all(|c| c.correct <= c.gold));
                prop_assert!(b.dominant.len() <= 3);
                prop_assert_eq!(b.relations.iter().map(|c| c.gold).sum::<usize>(), b.count);
            }
        }

        #[test]
        fn full_curve_point_is_the_overall_score(rs in records()) {
            let labels = LabelSet::default();
            let pts = variance_sorted_f1(&rs, &[100], &labels).unwrap();
            prop_assert_eq!(pts[0].size, rs.len());
            prop_assert_eq!(pts[0].micro_f1, micro_f1(&rs, &labels).unwrap());
        }

        #[test]
        fn variance_ignores_non_entity_rows(
            sigma in prop::collection::vec(0.01f64..3.0, 24),
            noise in prop::collection::vec(0.01f64..3.0, 24),
            flags in prop::collection::vec(any::<bool>(), 6),
        ) {
            prop_assume!(flags.iter().any(|&f| f));
            let mask = EntityMask::new(flags.clone());
            let a = Tensor::new(vec![6, 4], sigma.clone()).unwrap();
            let mut perturbed = sigma;
            for (i, f) in flags.iter().enumerate() {
                if !f {
                    perturbed[i * 4..(i + 1) * 4].copy_from_slice(&noise[i * 4..(i + 1) * 4]);
                }
            }
            let b = Tensor::new(vec![6, 4], perturbed).unwrap();
            prop_assert_eq!(mean_entity_variance(&a, &mask).unwrap(), mean_entity_variance(&b, &mask).unwrap());
        }
    }
}
