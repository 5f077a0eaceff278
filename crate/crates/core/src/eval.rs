//! Retrieval evaluation: query/gallery protocols, CMC and mAP.

use std::fmt;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::color_aug::Modality;
use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor};

/// Largest rank reported on the CMC curve.
pub const CMC_RANKS: usize = 20;

/// Header of a retrieval report CSV.
pub const REPORT_HEADER: [&str; 4] = ["direction", "metric", "k", "value"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Direction {
    /// Infrared queries against an RGB gallery.
    #[serde(rename = "nir-rgb")]
    NirToRgb,
    #[serde(rename = "rgb-nir")]
    RgbToNir,
    /// Cloth-change: RGB against RGB, different clothing only.
    #[serde(rename = "cc")]
    ClothChange,
}

impl Direction {
    pub fn as_str(self) -> &'static str {
        match self {
            Direction::NirToRgb => "nir-rgb",
            Direction::RgbToNir => "rgb-nir",
            Direction::ClothChange => "cc",
        }
    }

    pub fn reversed(self) -> Self {
        match self {
            Direction::NirToRgb => Direction::RgbToNir,
            Direction::RgbToNir => Direction::NirToRgb,
            Direction::ClothChange => Direction::ClothChange,
        }
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Direction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "nir-rgb" | "nir2rgb" | "ir-rgb" => Ok(Direction::NirToRgb),
            "rgb-nir" | "rgb2nir" | "rgb-ir" => Ok(Direction::RgbToNir),
            "cc" => Ok(Direction::ClothChange),
            other => Err(Error::invalid("Direction", format!("unknown direction `{other}` (nir-rgb, rgb-nir, cc)"))),
        }
    }
}

/// Labels of one query or gallery image.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ItemMeta {
    pub identity: usize,
    pub modality: Modality,
    pub view: usize,
    pub clothing: usize,
}

/// How a gallery item counts for a given query.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Relevance {
    Relevant,
    Irrelevant,
    /// Removed from the query's candidate list.
    Excluded,
}

/// Query/gallery relevance rule of a protocol. Gallery items sharing the
/// query's view are always excluded. Under cloth-change, a same-identity
/// item in the same clothing is not relevant and is dropped from the list
/// rather than counted as a miss.
pub fn relevance(direction: Direction, q: &ItemMeta, g: &ItemMeta) -> Relevance {
    if q.view == g.view {
        return Relevance::Excluded;
    }
    if q.identity != g.identity {
        return Relevance::Irrelevant;
    }
    match direction {
        Direction::ClothChange if q.clothing == g.clothing => Relevance::Excluded,
        _ => Relevance::Relevant,
    }
}

/// Indices (into the item list) of the queries and the gallery.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QueryGallery {
    pub direction: Direction,
    pub queries: Vec<usize>,
    pub gallery: Vec<usize>,
}

/// Split `items` into queries and gallery. Cloth-change uses every RGB item
/// on both sides.
pub fn build_query_gallery(items: &[ItemMeta], direction: Direction) -> Result<QueryGallery> {
    let of = |m: Modality| items.iter().enumerate().filter(|(_, it)| it.modality == m).map(|(i, _)| i).collect::<Vec<_>>();
    let (queries, gallery) = match direction {
        Direction::NirToRgb => (of(Modality::Ir), of(Modality::Rgb)),
        Direction::RgbToNir => (of(Modality::Rgb), of(Modality::Ir)),
        Direction::ClothChange => {
            let rgb = of(Modality::Rgb);
            let sets: std::collections::BTreeSet<usize> = rgb.iter().map(|&i| items[i].clothing).collect();
            if sets.len() < 2 {
                return Err(Error::invalid("build_query_gallery", "cloth-change protocol needs at least two clothing sets"));
            }
            (rgb.clone(), rgb)
        }
    };
    if queries.is_empty() || gallery.is_empty() {
        return Err(Error::invalid(
            "build_query_gallery",
            format!("{direction}: {} queries, {} gallery items", queries.len(), gallery.len()),
        ));
    }
    Ok(QueryGallery { direction, queries, gallery })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub direction: Direction,
    /// Rank-k accuracy for k = 1..=20.
    pub cmc: Vec<f64>,
    pub map: f64,
    /// Queries scored (those with at least one relevant candidate).
    pub n_queries: usize,
    pub n_gallery: usize,
    /// Queries dropped for lack of a relevant candidate.
    pub n_dropped: usize,
    /// 1-based rank of the first relevant item per scored query.
    pub first_hit: Vec<usize>,
}

impl RetrievalReport {
    pub fn rank1(&self) -> f64 {
        self.cmc[0]
    }

    pub fn rank(&self, k: usize) -> f64 {
        self.cmc[k.clamp(1, CMC_RANKS) - 1]
    }

    /// Structural checks: CMC nondecreasing, all metrics in `[0, 1]`.
    pub fn validate(&self) -> Result<()> {
        let ok = self.cmc.len() == CMC_RANKS
            && self.cmc.windows(2).all(|w| w[0] <= w[1])
            && self.cmc.iter().chain([&self.map]).all(|v| (0.0..=1.0).contains(v))
            && self.n_queries > 0;
        if ok {
            Ok(())
        } else {
            Err(Error::invalid("RetrievalReport", format!("malformed report for {}", self.direction)))
        }
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(REPORT_HEADER)?;
        let dir = self.direction.as_str();
        for (k, v) in self.cmc.iter().enumerate() {
            w.write_record([dir, "cmc", &(k + 1).to_string(), &v.to_string()])?;
        }
        w.write_record([dir, "map", "0", &self.map.to_string()])?;
        w.write_record([dir, "n_queries", "0", &self.n_queries.to_string()])?;
        w.write_record([dir, "n_gallery", "0", &self.n_gallery.to_string()])?;
        w.write_record([dir, "n_dropped", "0", &self.n_dropped.to_string()])?;
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    /// Read back a report written by [`RetrievalReport::write_csv`].
    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        if r.headers()?.iter().ne(REPORT_HEADER) {
            return Err(Error::Config(format!("{}: expected header {}", path.display(), REPORT_HEADER.join(","))));
        }
        let bad = |what: &str| Error::Config(format!("{}: {what}", path.display()));
        let mut direction = None;
        let mut cmc = vec![f64::NAN; CMC_RANKS];
        let (mut map, mut nq, mut ng, mut nd) = (f64::NAN, 0, 0, 0);
        for rec in r.records() {
            let rec = rec?;
            direction = Some(rec[0].parse::<Direction>()?);
            let k: usize = rec[2].parse().map_err(|_| bad("bad k"))?;
            let v: f64 = rec[3].parse().map_err(|_| bad("bad value"))?;
            match &rec[1] {
                "cmc" if (1..=CMC_RANKS).contains(&k) => cmc[k - 1] = v,
                "map" => map = v,
                "n_queries" => nq = v as usize,
                "n_gallery" => ng = v as usize,
                "n_dropped" => nd = v as usize,
                other => return Err(bad(&format!("unknown row `{other}`"))),
            }
        }
        let direction = direction.ok_or_else(|| bad("empty report"))?;
        let report = RetrievalReport { direction, cmc, map, n_queries: nq, n_gallery: ng, n_dropped: nd, first_hit: Vec::new() };
        report.validate()?;
        Ok(report)
    }

    pub fn print_table(&self, out: &mut impl Write) -> std::io::Result<()> {
        writeln!(
            out,
            "{:<8} Rank1 {:>6.2}  Rank5 {:>6.2}  Rank10 {:>6.2}  Rank20 {:>6.2}  mAP {:>6.2}  ({} queries, {} gallery)",
            self.direction.as_str(),
            100.0 * self.rank(1),
            100.0 * self.rank(5),
            100.0 * self.rank(10),
            100.0 * self.rank(20),
            100.0 * self.map,
            self.n_queries,
            self.n_gallery
        )
    }
}

fn sq_dist<T: Scalar>(a: &[T], b: &[T]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x.as_f64() - y.as_f64()).powi(2)).sum()
}

/// Rank the gallery for every query under `direction`'s relevance rule.
pub fn cmc_map<T: Scalar>(
    direction: Direction,
    query_feats: &Tensor<T>,
    query_meta: &[ItemMeta],
    gallery_feats: &Tensor<T>,
    gallery_meta: &[ItemMeta],
) -> Result<RetrievalReport> {
    cmc_map_with(direction, query_feats, query_meta, gallery_feats, gallery_meta, |q, g| relevance(direction, q, g))
}

/// [`cmc_map`] with a caller-supplied relevance rule.
pub fn cmc_map_with<T: Scalar>(
    direction: Direction,
    query_feats: &Tensor<T>,
    query_meta: &[ItemMeta],
    gallery_feats: &Tensor<T>,
    gallery_meta: &[ItemMeta],
    rule: impl Fn(&ItemMeta, &ItemMeta) -> Relevance,
) -> Result<RetrievalReport> {
    let (nq, d) = query_feats.dims2()?;
    let (ng, dg) = gallery_feats.dims2()?;
    if d != dg {
        return Err(Error::shape("cmc_map", format!("query dim {d} vs gallery dim {dg}")));
    }
    if nq != query_meta.len() || ng != gallery_meta.len() {
        return Err(Error::shape(
            "cmc_map",
            format!("{nq} query rows / {} labels, {ng} gallery rows / {} labels", query_meta.len(), gallery_meta.len()),
        ));
    }
    let mut hits = vec![0usize; CMC_RANKS];
    let mut ap_sum = 0.0;
    let mut first_hit = Vec::with_capacity(nq);
    let mut dropped = 0;
    let mut ranked: Vec<(f64, usize, bool)> = Vec::with_capacity(ng);
    for qi in 0..nq {
        let q = query_feats.row(qi);
        ranked.clear();
        for gi in 0..ng {
            match rule(&query_meta[qi], &gallery_meta[gi]) {
                Relevance::Excluded => {}
                r => ranked.push((sq_dist(q, gallery_feats.row(gi)), gi, r == Relevance::Relevant)),
            }
        }
        let n_rel = ranked.iter().filter(|r| r.2).count();
        if n_rel == 0 {
            dropped += 1;
            continue;
        }
        ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let mut found = 0usize;
        let mut ap = 0.0;
        let mut first = 0;
        for (r, item) in ranked.iter().enumerate() {
            if item.2 {
                found += 1;
                if found == 1 {
                    first = r + 1;
                }
                ap += found as f64 / (r + 1) as f64;
                if found == n_rel {
                    break;
                }
            }
        }
        for (k, h) in hits.iter_mut().enumerate() {
            if first <= k + 1 {
                *h += 1;
            }
        }
        ap_sum += ap / n_rel as f64;
        first_hit.push(first);
    }
    let scored = nq - dropped;
    if scored == 0 {
        return Err(Error::invalid("cmc_map", format!("{direction}: no query has a relevant gallery item")));
    }
    Ok(RetrievalReport {
        direction,
        cmc: hits.iter().map(|&h| h as f64 / scored as f64).collect(),
        map: ap_sum / scored as f64,
        n_queries: scored,
        n_gallery: ng,
        n_dropped: dropped,
        first_hit,
    })
}

/// Expected Rank-1 accuracy of a uniformly random ranking.
pub fn chance_rank1(direction: Direction, query_meta: &[ItemMeta], gallery_meta: &[ItemMeta]) -> f64 {
    let mut total = 0.0;
    let mut n = 0;
    for q in query_meta {
        let (mut rel, mut cand) = (0usize, 0usize);
        for g in gallery_meta {
            match relevance(direction, q, g) {
                Relevance::Excluded => {}
                Relevance::Relevant => {
                    rel += 1;
                    cand += 1;
                }
                Relevance::Irrelevant => cand += 1,
            }
        }
        if rel > 0 {
            total += rel as f64 / cand as f64;
            n += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        total / n as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn meta(identity: usize, modality: Modality, view: usize, clothing: usize) -> ItemMeta {
        ItemMeta { identity, modality, view, clothing }
    }

    fn feats(rows: &[&[f64]]) -> Tensor<f64> {
        let d = rows[0].len();
        Tensor::new([rows.len(), d], rows.iter().flat_map(|r| r.iter().copied()).collect()).unwrap()
    }

    #[test]
    fn first_relevant_at_rank_two() {
        let q = feats(&[&[1.0, 0.0]]);
        let g = feats(&[&[0.9, 0.1], &[0.8, 0.3], &[-1.0, 0.0]]);
        let qm = [meta(0, Modality::Ir, 0, 0)];
        let gm = [meta(1, Modality::Rgb, 1, 0), meta(0, Modality::Rgb, 1, 0), meta(2, Modality::Rgb, 1, 0)];
        let r = cmc_map(Direction::NirToRgb, &q, &qm, &g, &gm).unwrap();
        assert_eq!(r.cmc[0], 0.0);
        assert!(r.cmc[1..].iter().all(|&v| v == 1.0));
        assert_eq!(r.map, 0.5);
    }

    #[test]
    fn relevant_at_ranks_one_and_three() {
        let q = feats(&[&[0.0]]);
        let g = feats(&[&[0.1], &[0.2], &[0.3]]);
        let qm = [meta(0, Modality::Ir, 0, 0)];
        let gm = [meta(0, Modality::Rgb, 1, 0), meta(1, Modality::Rgb, 1, 0), meta(0, Modality::Rgb, 2, 0)];
        let r = cmc_map(Direction::NirToRgb, &q, &qm, &g, &gm).unwrap();
        assert_eq!(r.map, (1.0 + 2.0 / 3.0) / 2.0);
    }

    #[test]
    fn tie_broken_by_gallery_index() {
        let q = feats(&[&[0.0]]);
        let g = feats(&[&[1.0], &[1.0]]);
        let qm = [meta(0, Modality::Ir, 0, 0)];
        let gm = [meta(1, Modality::Rgb, 1, 0), meta(0, Modality::Rgb, 1, 0)];
        let r = cmc_map(Direction::NirToRgb, &q, &qm, &g, &gm).unwrap();
        assert_eq!(r.first_hit, vec![2]);
    }

    #[test]
    fn same_view_excluded_and_queries_dropped() {
        let q = feats(&[&[0.0], &[5.0]]);
        let g = feats(&[&[0.0], &[1.0]]);
        let qm = [meta(0, Modality::Ir, 0, 0), meta(1, Modality::Ir, 0, 0)];
        let gm = [meta(0, Modality::Rgb, 0, 0), meta(0, Modality::Rgb, 1, 0)];
        let r = cmc_map(Direction::NirToRgb, &q, &qm, &g, &gm).unwrap();
        assert_eq!((r.n_queries, r.n_dropped), (1, 1));
        assert_eq!(r.rank1(), 1.0);
        assert!(cmc_map(Direction::NirToRgb, &q, &qm[..1], &g, &gm).is_err());
        assert!(cmc_map(Direction::NirToRgb, &q, &qm, &feats(&[&[0.0, 1.0], &[1.0, 0.0]]), &gm).is_err());
    }

    #[test]
    fn cloth_change_relevance() {
        let q = meta(3, Modality::Rgb, 0, 1);
        assert_eq!(relevance(Direction::ClothChange, &q, &meta(3, Modality::Rgb, 2, 1)), Relevance::Excluded);
        assert_eq!(relevance(Direction::ClothChange, &q, &meta(3, Modality::Rgb, 2, 0)), Relevance::Relevant);
        assert_eq!(relevance(Direction::ClothChange, &q, &meta(4, Modality::Rgb, 2, 1)), Relevance::Irrelevant);
        assert_eq!(relevance(Direction::ClothChange, &q, &meta(3, Modality::Rgb, 0, 0)), Relevance::Excluded);
    }

    #[test]
    fn perfect_embeddings() {
        let mut qm = Vec::new();
        let mut gm = Vec::new();
        let mut qf = Vec::new();
        let mut gf = Vec::new();
        for id in 0..4 {
            for v in 0..3 {
                let mut onehot = vec![0.0; 4];
                onehot[id] = 1.0;
                qm.push(meta(id, Modality::Ir, v, 0));
                gm.push(meta(id, Modality::Rgb, v, 0));
                qf.extend_from_slice(&onehot);
                gf.extend_from_slice(&onehot);
            }
        }
        let q = Tensor::new([12, 4], qf).unwrap();
        let g = Tensor::new([12, 4], gf).unwrap();
        let r = cmc_map(Direction::NirToRgb, &q, &qm, &g, &gm).unwrap();
        assert_eq!((r.rank1(), r.map), (1.0, 1.0));
    }

    #[test]
    fn split_by_direction() {
        let items = [meta(0, Modality::Ir, 0, 0), meta(0, Modality::Rgb, 1, 0), meta(1, Modality::Rgb, 0, 0)];
        let a = build_query_gallery(&items, Direction::NirToRgb).unwrap();
        let b = build_query_gallery(&items, Direction::RgbToNir).unwrap();
        assert_eq!((a.queries.clone(), a.gallery.clone()), (vec![0], vec![1, 2]));
        assert_eq!((b.queries, b.gallery), (a.gallery, a.queries));
        assert!(build_query_gallery(&items[1..], Direction::NirToRgb).is_err());
        assert!(build_query_gallery(&items, Direction::ClothChange).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 12;
        let q = Tensor::new([n, 3], (0..n * 3).map(|_| rng.random::<f64>()).collect()).unwrap();
        let m: Vec<_> = (0..n).map(|i| meta(i % 3, Modality::Rgb, i % 4, i % 2)).collect();
        let r = cmc_map(Direction::ClothChange, &q, &m, &q, &m).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.csv");
        r.write_csv(&path).unwrap();
        let back = RetrievalReport::read_csv(&path).unwrap();
        assert_eq!(back.cmc, r.cmc);
        assert_eq!(back.map, r.map);
        assert_eq!(back.n_queries, r.n_queries);
    }
}
