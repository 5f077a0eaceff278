//! Brute-force retrieval metrics to check the evaluator against.

use csl::color_aug::Modality;
use csl::eval::{cmc_map, relevance, Direction, ItemMeta, Relevance, RetrievalReport, CMC_RANKS};
use csl::numerics::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const DIRECTIONS: [Direction; 3] = [Direction::NirToRgb, Direction::RgbToNir, Direction::ClothChange];

pub struct Instance {
    pub q: Tensor<f64>,
    pub qm: Vec<ItemMeta>,
    pub g: Tensor<f64>,
    pub gm: Vec<ItemMeta>,
}

pub fn metas(n: usize, rng: &mut ChaCha8Rng) -> Vec<ItemMeta> {
    (0..n)
        .map(|_| ItemMeta {
            identity: rng.random_range(0..8),
            modality: if rng.random_bool(0.5) { Modality::Rgb } else { Modality::Ir },
            view: rng.random_range(0..4),
            clothing: rng.random_range(0..3),
        })
        .collect()
}

/// Coarse features when `quantized`, so exact distance ties occur.
pub fn instance(seed: u64, nq: usize, ng: usize, d: usize, quantized: bool) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut feats = |n: usize| {
        let v = (0..n * d)
            .map(|_| if quantized { rng.random_range(-2i32..=2) as f64 } else { rng.random_range(-1.0..1.0) })
            .collect();
        Tensor::new([n, d], v).unwrap()
    };
    let q = feats(nq);
    let g = feats(ng);
    Instance { q, qm: metas(nq, &mut rng), g, gm: metas(ng, &mut rng) }
}

/// Every (query, gallery) pair scored, each gallery item's rank counted
/// directly, AP accumulated over relevant items in rank order.
pub fn brute_force(direction: Direction, inst: &Instance) -> Option<(Vec<f64>, f64, Vec<usize>)> {
    let (nq, d) = inst.q.dims2().unwrap();
    let ng = inst.gm.len();
    let dist = |qi: usize, gi: usize| -> f64 {
        let mut s = 0.0;
        for k in 0..d {
            let diff = inst.q.data()[qi * d + k] - inst.g.data()[gi * d + k];
            s += diff * diff;
        }
        s
    };
    let mut hits = vec![0usize; CMC_RANKS];
    let mut ap_sum = 0.0;
    let mut first_hits = Vec::new();
    for qi in 0..nq {
        let kept: Vec<usize> = (0..ng).filter(|&gi| relevance(direction, &inst.qm[qi], &inst.gm[gi]) != Relevance::Excluded).collect();
        let rank_of = |gi: usize| -> usize {
            let dg = dist(qi, gi);
            1 + kept.iter().filter(|&&o| o != gi && (dist(qi, o) < dg || (dist(qi, o) == dg && o < gi))).count()
        };
        let mut rel_ranks: Vec<usize> = kept
            .iter()
            .filter(|&&gi| relevance(direction, &inst.qm[qi], &inst.gm[gi]) == Relevance::Relevant)
            .map(|&gi| rank_of(gi))
            .collect();
        if rel_ranks.is_empty() {
            continue;
        }
        rel_ranks.sort_unstable();
        let first = rel_ranks[0];
        for (k, h) in hits.iter_mut().enumerate() {
            if first <= k + 1 {
                *h += 1;
            }
        }
        let mut ap = 0.0;
        for (i, &r) in rel_ranks.iter().enumerate() {
            ap += (i + 1) as f64 / r as f64;
        }
        ap_sum += ap / rel_ranks.len() as f64;
        first_hits.push(first);
    }
    let scored = first_hits.len();
    if scored == 0 {
        return None;
    }
    Some((hits.iter().map(|&h| h as f64 / scored as f64).collect(), ap_sum / scored as f64, first_hits))
}

pub fn evaluate(direction: Direction, inst: &Instance) -> Option<RetrievalReport> {
    cmc_map(direction, &inst.q, &inst.qm, &inst.g, &inst.gm).ok()
}

/// Compare against the oracle on 25 seeded instances; returns the first
/// disagreement, if any.
pub fn compare_seeded_instances() -> Option<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for seed in 0..25u64 {
        let nq = rng.random_range(1..=50);
        let ng = rng.random_range(1..=200);
        let d = rng.random_range(1..=6);
        let inst = instance(seed, nq, ng, d, seed % 2 == 0);
        for direction in DIRECTIONS {
            let expected = brute_force(direction, &inst);
            let got = evaluate(direction, &inst);
            match (expected, got) {
                (None, None) => {}
                (Some((cmc, map, first)), Some(r)) => {
                    if r.cmc != cmc || r.map != map || r.first_hit != first || r.n_queries + r.n_dropped != nq {
                        return Some(format!("seed {seed} {direction}: oracle {cmc:?} {map} vs evaluator {r:?}"));
                    }
                }
                (e, g) => return Some(format!("seed {seed} {direction}: oracle {e:?} vs evaluator {g:?}")),
            }
        }
    }
    None
}
