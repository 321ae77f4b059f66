//! Synthetic place datasets, descriptor databases, exact retrieval and
//! recall@k.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::graph::ModelGraph;
use crate::qtns;
use crate::tensor::Tensor;

/// Rows whose norm deviates from 1 by more than this are rejected.
pub const UNIT_NORM_TOL: f32 = 1e-3;

pub const INDEX_FILE: &str = "index.csv";
pub const GT_FILE: &str = "gt.txt";

/// Perturbation knobs: `noise` models appearance change, `brightness`
/// illumination and `translation` viewpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    pub places: usize,
    pub queries_per_place: usize,
    pub input_shape: [usize; 3],
    /// Gaussian noise standard deviation (references have unit std).
    pub noise: f32,
    /// Maximum absolute brightness offset, drawn uniformly per query.
    pub brightness: f32,
    /// Maximum absolute shift in pixels along each spatial axis.
    pub translation: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            places: 64,
            queries_per_place: 4,
            input_shape: [3, 32, 32],
            noise: 0.3,
            brightness: 0.2,
            translation: 2,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlaceDataset {
    /// `[P, C, H, W]`, one reference per place.
    pub references: Tensor,
    /// `[Q, C, H, W]`
    pub queries: Tensor,
    /// Place id of every reference row.
    pub reference_places: Vec<usize>,
    /// Ground-truth place id of every query row.
    pub query_places: Vec<usize>,
}

impl PlaceDataset {
    pub fn validate(&self) -> Result<()> {
        let (r, q) = (self.references.shape(), self.queries.shape());
        if r.len() != 4 || q.len() != 4 || r[1..] != q[1..] {
            return Err(Error::invalid(
                "PlaceDataset",
                format!("reference shape {r:?} and query shape {q:?} are incompatible"),
            ));
        }
        if self.reference_places.len() != r[0] || self.query_places.len() != q[0] {
            return Err(Error::invalid("PlaceDataset", "place id count does not match tensor rows"));
        }
        if let Some(id) = self.query_places.iter().find(|id| !self.reference_places.contains(id)) {
            return Err(Error::invalid(
                "PlaceDataset",
                format!("query place {id} has no reference"),
            ));
        }
        Ok(())
    }

    pub fn sample_shape(&self) -> [usize; 3] {
        let s = self.references.shape();
        [s[1], s[2], s[3]]
    }
}

/// Two passes of a 3x3 box filter with clamped borders.
fn smooth(plane: &mut [f32], h: usize, w: usize) {
    let mut tmp = vec![0f32; plane.len()];
    for _ in 0..2 {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0f32;
                for dy in [-1i64, 0, 1] {
                    for dx in [-1i64, 0, 1] {
                        let yy = (y as i64 + dy).clamp(0, h as i64 - 1) as usize;
                        let xx = (x as i64 + dx).clamp(0, w as i64 - 1) as usize;
                        acc += plane[yy * w + xx];
                    }
                }
                tmp[y * w + x] = acc / 9.0;
            }
        }
        plane.copy_from_slice(&tmp);
    }
}

fn standardize(v: &mut [f32]) {
    let n = v.len() as f64;
    let mean = v.iter().map(|&x| f64::from(x)).sum::<f64>() / n;
    let var = v.iter().map(|&x| (f64::from(x) - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt().max(1e-12);
    v.iter_mut().for_each(|x| *x = ((f64::from(*x) - mean) / std) as f32);
}

/// Shifts every plane by `(dy, dx)`, replicating edge pixels.
fn translate(sample: &[f32], [c, h, w]: [usize; 3], dy: i64, dx: i64) -> Vec<f32> {
    let mut out = vec![0f32; sample.len()];
    for ch in 0..c {
        for y in 0..h {
            let sy = (y as i64 - dy).clamp(0, h as i64 - 1) as usize;
            for x in 0..w {
                let sx = (x as i64 - dx).clamp(0, w as i64 - 1) as usize;
                out[(ch * h + y) * w + x] = sample[(ch * h + sy) * w + sx];
            }
        }
    }
    out
}

fn symmetric<R: Rng>(rng: &mut R, max: f32) -> f32 {
    if max > 0.0 {
        rng.random_range(-max..=max)
    } else {
        0.0
    }
}

/// Smooth random references and perturbed queries, deterministic per seed.
pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<PlaceDataset> {
    if cfg.places < 2 {
        return Err(Error::invalid("generate_synthetic", "at least two places are required"));
    }
    if cfg.queries_per_place == 0 {
        return Err(Error::invalid("generate_synthetic", "at least one query per place is required"));
    }
    if !(cfg.noise >= 0.0 && cfg.brightness >= 0.0) {
        return Err(Error::invalid("generate_synthetic", "noise and brightness must be non-negative"));
    }
    let [c, h, w] = cfg.input_shape;
    if c * h * w == 0 {
        return Err(Error::invalid("generate_synthetic", "input shape has a zero extent"));
    }
    let per = c * h * w;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let std_normal = Normal::new(0f32, 1.0).expect("valid normal");

    let mut refs = Vec::with_capacity(cfg.places * per);
    for _ in 0..cfg.places {
        let mut s: Vec<f32> = (0..per).map(|_| std_normal.sample(&mut rng)).collect();
        for plane in s.chunks_mut(h * w) {
            smooth(plane, h, w);
        }
        standardize(&mut s);
        refs.extend_from_slice(&s);
    }

    let t = cfg.translation as i64;
    let nq = cfg.places * cfg.queries_per_place;
    let mut queries = Vec::with_capacity(nq * per);
    let mut query_places = Vec::with_capacity(nq);
    for place in 0..cfg.places {
        let base = &refs[place * per..(place + 1) * per];
        for _ in 0..cfg.queries_per_place {
            let (dy, dx) = if t > 0 {
                (rng.random_range(-t..=t), rng.random_range(-t..=t))
            } else {
                (0, 0)
            };
            let shift = symmetric(&mut rng, cfg.brightness);
            let mut q = translate(base, cfg.input_shape, dy, dx);
            for v in q.iter_mut() {
                let n = if cfg.noise > 0.0 {
                    cfg.noise * std_normal.sample(&mut rng)
                } else {
                    0.0
                };
                *v += shift + n;
            }
            queries.extend_from_slice(&q);
            query_places.push(place);
        }
    }
    Ok(PlaceDataset {
        references: Tensor::from_f32(&[cfg.places, c, h, w], refs)?,
        queries: Tensor::from_f32(&[nq, c, h, w], queries)?,
        reference_places: (0..cfg.places).collect(),
        query_places,
    })
}

fn sample_tensor(batch: &Tensor, i: usize) -> Result<Tensor> {
    let s = batch.shape();
    let per: usize = s[1..].iter().product();
    Tensor::from_f32(&s[1..], batch.as_f32()?[i * per..(i + 1) * per].to_vec())
}

/// Writes `references/NNNNN.qtns`, `queries/NNNNN.qtns` and an index with one
/// `query_path,ref_path,place_id` line per query.
pub fn save_dataset(ds: &PlaceDataset, dir: impl AsRef<Path>) -> Result<()> {
    ds.validate()?;
    let dir = dir.as_ref();
    for sub in ["references", "queries"] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(|e| Error::file(&p, e))?;
    }
    let ref_path = |place: usize| {
        let row = ds.reference_places.iter().position(|&p| p == place).expect("validated");
        format!("references/{row:05}.qtns")
    };
    for i in 0..ds.reference_places.len() {
        qtns::save(&sample_tensor(&ds.references, i)?, dir.join(format!("references/{i:05}.qtns")))?;
    }
    let mut index = String::new();
    for (i, &place) in ds.query_places.iter().enumerate() {
        let qp = format!("queries/{i:05}.qtns");
        qtns::save(&sample_tensor(&ds.queries, i)?, dir.join(&qp))?;
        index += &format!("{qp},{},{place}\n", ref_path(place));
    }
    let p = dir.join(INDEX_FILE);
    fs::write(&p, index).map_err(|e| Error::file(&p, e))?;
    let p = dir.join(GT_FILE);
    fs::write(&p, write_ground_truth(&ds.query_places)).map_err(|e| Error::file(&p, e))
}

/// One `query_row,place_id` line per query.
pub fn write_ground_truth(query_places: &[usize]) -> String {
    query_places
        .iter()
        .enumerate()
        .map(|(i, p)| format!("{i},{p}\n"))
        .collect()
}

/// Parses `query_row,place_id` lines; every row from 0 to Q-1 must appear
/// exactly once.
pub fn parse_ground_truth(text: &str) -> Result<Vec<usize>> {
    let mut pairs = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |msg: &str| Error::Config {
            line: n + 1,
            msg: format!("ground truth: {msg}"),
        };
        let (row, id) = line.split_once(',').ok_or_else(|| bad("expected query_row,place_id"))?;
        let row: usize = row.trim().parse().map_err(|_| bad("bad query row"))?;
        let id: usize = id.trim().parse().map_err(|_| bad("bad place id"))?;
        pairs.push((row, id));
    }
    let mut out = vec![None; pairs.len()];
    for (row, id) in pairs {
        match out.get_mut(row) {
            Some(slot @ None) => *slot = Some(id),
            Some(Some(_)) => {
                return Err(Error::invalid("ground truth", format!("query row {row} listed twice")))
            }
            None => {
                return Err(Error::invalid("ground truth", format!("query row {row} is out of range")))
            }
        }
    }
    Ok(out.into_iter().map(|v| v.expect("all rows filled")).collect())
}

pub fn load_ground_truth(path: impl AsRef<Path>) -> Result<Vec<usize>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
    parse_ground_truth(&text)
}

/// Reads a dataset directory written by [`save_dataset`]. References are
/// ordered by place id.
pub fn load_dataset(dir: impl AsRef<Path>) -> Result<PlaceDataset> {
    let dir = dir.as_ref();
    let ip = dir.join(INDEX_FILE);
    let text = fs::read_to_string(&ip).map_err(|e| Error::file(&ip, e))?;
    let mut entries = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |msg: &str| Error::Config {
            line: n + 1,
            msg: format!("{INDEX_FILE}: {msg}"),
        };
        let parts: Vec<&str> = line.split(',').map(str::trim).collect();
        let [q, r, id] = parts[..] else {
            return Err(bad("expected query_path,ref_path,place_id"));
        };
        let id: usize = id.parse().map_err(|_| bad("place id is not a non-negative integer"))?;
        entries.push((q.to_string(), r.to_string(), id));
    }
    if entries.is_empty() {
        return Err(Error::invalid("load_dataset", "index lists no queries"));
    }
    let mut places: Vec<(usize, String)> = Vec::new();
    for (_, r, id) in &entries {
        match places.iter().find(|(p, _)| p == id) {
            Some((_, path)) if path != r => {
                return Err(Error::invalid(
                    "load_dataset",
                    format!("place {id} maps to both {path} and {r}"),
                ))
            }
            Some(_) => {}
            None => places.push((*id, r.clone())),
        }
    }
    places.sort();
    let load_all = |paths: Vec<&str>| -> Result<Tensor> {
        let mut shape: Option<Vec<usize>> = None;
        let mut data = Vec::new();
        for p in &paths {
            let t = qtns::load(dir.join(p))?.cast_f32()?;
            match &shape {
                None => shape = Some(t.shape().to_vec()),
                Some(s) if s != t.shape() => {
                    return Err(Error::invalid(
                        "load_dataset",
                        format!("{p} has shape {:?}, expected {s:?}", t.shape()),
                    ))
                }
                _ => {}
            }
            data.extend_from_slice(t.as_f32()?);
        }
        let mut full = vec![paths.len()];
        full.extend(shape.unwrap_or_default());
        Tensor::from_f32(&full, data)
    };
    let ds = PlaceDataset {
        references: load_all(places.iter().map(|(_, p)| p.as_str()).collect())?,
        queries: load_all(entries.iter().map(|(q, _, _)| q.as_str()).collect())?,
        reference_places: places.iter().map(|(id, _)| *id).collect(),
        query_places: entries.iter().map(|(_, _, id)| *id).collect(),
    };
    ds.validate()?;
    Ok(ds)
}

/// L2-normalized descriptors with their place ids.
#[derive(Debug, Clone, PartialEq)]
pub struct DescriptorDB {
    data: Vec<f32>,
    dim: usize,
    ids: Vec<usize>,
}

impl DescriptorDB {
    /// `descriptors` is `[N, D]`; every row must be unit norm or all zero.
    pub fn new(descriptors: &Tensor, ids: Vec<usize>) -> Result<Self> {
        let s = descriptors.shape();
        if s.len() != 2 || s[0] == 0 || s[1] == 0 {
            return Err(Error::invalid("DescriptorDB", format!("expected a non-empty [N, D] matrix, got {s:?}")));
        }
        if ids.len() != s[0] {
            return Err(Error::ShapeMismatch {
                op: "DescriptorDB",
                dim: "place id count",
                expected: s[0],
                actual: ids.len(),
            });
        }
        let data = descriptors.as_f32()?.to_vec();
        for (i, row) in data.chunks(s[1]).enumerate() {
            let n = row.iter().map(|v| f64::from(*v).powi(2)).sum::<f64>().sqrt() as f32;
            if n != 0.0 && (n - 1.0).abs() > UNIT_NORM_TOL {
                return Err(Error::invalid("DescriptorDB", format!("row {i} has norm {n}")));
            }
        }
        Ok(DescriptorDB { data, dim: s[1], ids })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    /// Same descriptors with different place ids.
    pub fn with_ids(&self, ids: Vec<usize>) -> Result<Self> {
        if ids.len() != self.len() {
            return Err(Error::ShapeMismatch {
                op: "DescriptorDB",
                dim: "place id count",
                expected: self.len(),
                actual: ids.len(),
            });
        }
        Ok(DescriptorDB { ids, ..self.clone() })
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_f32(&[self.len(), self.dim], self.data.clone()).expect("consistent")
    }

    /// Bytes of f32 descriptor storage, `N * D * 4`.
    pub fn memory_bytes(&self) -> usize {
        self.data.len() * std::mem::size_of::<f32>()
    }

    /// QTNS f32 `[N, D]` record followed by a QTNS i32 `[N]` id record.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let ids = self
            .ids
            .iter()
            .map(|&i| i32::try_from(i).map_err(|_| Error::invalid("DescriptorDB", "place id exceeds i32")))
            .collect::<Result<Vec<_>>>()?;
        let mut out = qtns::encode(&self.to_tensor());
        qtns::write_into(&Tensor::from_i32(&[ids.len()], ids)?, &mut out);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let records = qtns::decode_all(bytes)?;
        let [desc, ids] = &records[..] else {
            return Err(Error::invalid(
                "DescriptorDB",
                format!("expected 2 records, found {}", records.len()),
            ));
        };
        let crate::tensor::Storage::I32(raw) = ids.storage() else {
            return Err(Error::DTypeMismatch {
                op: "DescriptorDB",
                expected: "i32",
                actual: ids.dtype().name(),
            });
        };
        let ids = raw
            .iter()
            .map(|&v| usize::try_from(v).map_err(|_| Error::invalid("DescriptorDB", "negative place id")))
            .collect::<Result<Vec<_>>>()?;
        DescriptorDB::new(&desc.cast_f32()?, ids)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()?).map_err(|e| Error::file(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::file(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Runs `images` (`[N, C, H, W]`) through the model.
pub fn encode_db(model: &ModelGraph, images: &Tensor, ids: Vec<usize>) -> Result<DescriptorDB> {
    DescriptorDB::new(&model.forward(images)?, ids)
}

pub fn encode_references(model: &ModelGraph, ds: &PlaceDataset) -> Result<DescriptorDB> {
    encode_db(model, &ds.references, ds.reference_places.clone())
}

pub fn encode_queries(model: &ModelGraph, ds: &PlaceDataset) -> Result<DescriptorDB> {
    encode_db(model, &ds.queries, ds.query_places.clone())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hit {
    /// Database row.
    pub index: usize,
    pub place: usize,
    pub score: f32,
}

pub fn inner_product(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Exact top-k by inner product, descending; equal scores rank the lower
/// row first.
pub fn search_topk(db: &DescriptorDB, query: &[f32], k: usize) -> Result<Vec<Hit>> {
    if query.len() != db.dim {
        return Err(Error::ShapeMismatch {
            op: "search_topk",
            dim: "descriptor dimension",
            expected: db.dim,
            actual: query.len(),
        });
    }
    if k > db.len() {
        return Err(Error::invalid(
            "search_topk",
            format!("k = {k} exceeds database size {}", db.len()),
        ));
    }
    let mut hits: Vec<Hit> = (0..db.len())
        .map(|i| Hit {
            index: i,
            place: db.ids[i],
            score: inner_product(db.row(i), query),
        })
        .collect();
    let order = |a: &Hit, b: &Hit| b.score.total_cmp(&a.score).then(a.index.cmp(&b.index));
    if k < hits.len() && k > 0 {
        hits.select_nth_unstable_by(k - 1, order);
    }
    hits.truncate(k);
    hits.sort_by(order);
    Ok(hits)
}

/// Fraction of queries whose ground-truth place is among their top-k
/// references. Query ids serve as ground truth.
pub fn recall_at_k(queries: &DescriptorDB, references: &DescriptorDB, k: usize) -> Result<f64> {
    if queries.is_empty() {
        return Err(Error::invalid("recall_at_k", "empty query set"));
    }
    if k == 0 {
        return Err(Error::invalid("recall_at_k", "k must be positive"));
    }
    let hits = (0..queries.len())
        .into_par_iter()
        .map(|i| {
            let top = search_topk(references, queries.row(i), k)?;
            Ok(top.iter().any(|h| h.place == queries.ids[i]))
        })
        .collect::<Result<Vec<bool>>>()?;
    Ok(hits.iter().filter(|&&h| h).count() as f64 / queries.len() as f64)
}

/// Recall at each requested cut-off.
pub fn recall_curve(queries: &DescriptorDB, references: &DescriptorDB, ks: &[usize]) -> Result<Vec<(usize, f64)>> {
    ks.iter().map(|&k| Ok((k, recall_at_k(queries, references, k)?))).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TripletMode {
    /// `d(x, y) = 1 - <x, y>`.
    #[default]
    CosineDistance,
    /// `d(x, y) = <x, y>`, the printed similarity form.
    LiteralSimilarity,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TripletSample {
    pub anchor: Vec<f32>,
    pub positive: Vec<f32>,
    pub negative: Vec<f32>,
    pub margin: f32,
}

/// `max(0, d(a, p) - d(a, n) + margin)`.
pub fn triplet_loss(t: &TripletSample, mode: TripletMode) -> Result<f32> {
    let d = t.anchor.len();
    if t.positive.len() != d || t.negative.len() != d {
        return Err(Error::invalid("triplet_loss", "descriptor lengths differ"));
    }
    if t.margin < 0.0 {
        return Err(Error::invalid("triplet_loss", "margin must be non-negative"));
    }
    let f = |x: &[f32], y: &[f32]| match mode {
        TripletMode::CosineDistance => 1.0 - inner_product(x, y),
        TripletMode::LiteralSimilarity => inner_product(x, y),
    };
    Ok((f(&t.anchor, &t.positive) - f(&t.anchor, &t.negative) + t.margin).max(0.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn db(rows: &[&[f32]], ids: Vec<usize>) -> DescriptorDB {
        let d = rows[0].len();
        let data = rows.concat();
        DescriptorDB::new(&Tensor::from_f32(&[rows.len(), d], data).unwrap(), ids).unwrap()
    }

    #[test]
    fn unperturbed_queries_equal_references() {
        let cfg = SyntheticConfig {
            places: 4,
            queries_per_place: 4,
            input_shape: [2, 6, 5],
            noise: 0.0,
            brightness: 0.0,
            translation: 0,
            seed: 3,
        };
        let ds = generate_synthetic(&cfg).unwrap();
        let per = 60;
        let r = ds.references.as_f32().unwrap();
        for (i, &p) in ds.query_places.iter().enumerate() {
            assert_eq!(&ds.queries.as_f32().unwrap()[i * per..(i + 1) * per], &r[p * per..(p + 1) * per]);
        }
        assert_eq!(generate_synthetic(&cfg).unwrap(), ds);
    }

    #[test]
    fn ground_truth_parsing() {
        assert_eq!(parse_ground_truth(&write_ground_truth(&[3, 1, 3])).unwrap(), vec![3, 1, 3]);
        assert_eq!(parse_ground_truth("1,5\n0,2\n").unwrap(), vec![2, 5]);
        assert!(parse_ground_truth("0,1\n0,2\n").is_err());
        assert!(parse_ground_truth("0,1\n5,2\n").is_err());
        assert!(parse_ground_truth("zero,1\n").is_err());
    }

    #[test]
    fn topk_basics() {
        let d = db(&[&[1.0, 0.0], &[0.0, 1.0]], vec![7, 9]);
        let top = search_topk(&d, &[1.0, 0.0], 1).unwrap();
        assert_eq!((top[0].index, top[0].place), (0, 7));
        let d3 = db(&[&[0.0, 1.0], &[0.0, 1.0], &[0.0, -1.0]], vec![0, 1, 2]);
        let ranked: Vec<usize> = search_topk(&d3, &[1.0, 0.0], 3).unwrap().iter().map(|h| h.index).collect();
        assert_eq!(ranked, vec![0, 1, 2]);
        assert!(search_topk(&d, &[1.0], 1).is_err());
        assert!(search_topk(&d, &[1.0, 0.0], 3).is_err());
    }

    #[test]
    fn recall_examples() {
        let refs = db(&[&[1.0, 0.0], &[0.0, 1.0]], vec![0, 1]);
        let q = db(&[&[0.9939, 0.1104], &[0.1104, 0.9939]], vec![0, 1]);
        assert_eq!(recall_at_k(&q, &refs, 1).unwrap(), 1.0);
        let swapped = db(&[&[0.9939, 0.1104], &[0.1104, 0.9939]], vec![1, 0]);
        assert_eq!(recall_at_k(&swapped, &refs, 1).unwrap(), 0.0);
        assert_eq!(recall_at_k(&swapped, &refs, 2).unwrap(), 1.0);
    }

    #[test]
    fn triplet_examples() {
        let e1 = vec![1.0, 0.0];
        let e2 = vec![0.0, 1.0];
        let t = |a: &Vec<f32>, p: &Vec<f32>, n: &Vec<f32>| TripletSample {
            anchor: a.clone(),
            positive: p.clone(),
            negative: n.clone(),
            margin: 0.1,
        };
        assert_eq!(triplet_loss(&t(&e1, &e1, &e2), TripletMode::CosineDistance).unwrap(), 0.0);
        let l = triplet_loss(&t(&e1, &e2, &e1), TripletMode::CosineDistance).unwrap();
        assert!((l - 1.1).abs() < 1e-6);
        assert_eq!(triplet_loss(&t(&e1, &e2, &e2), TripletMode::CosineDistance).unwrap(), 0.1);
        // the similarity form rewards the dissimilar positive
        let lit = triplet_loss(&t(&e1, &e1, &e2), TripletMode::LiteralSimilarity).unwrap();
        assert!((lit - 1.1).abs() < 1e-6);
    }

    #[test]
    fn db_file_roundtrip_and_memory() {
        let d = db(&[&[0.6, 0.8], &[0.0, 0.0], &[1.0, 0.0]], vec![3, 1, 4]);
        assert_eq!(d.memory_bytes(), 3 * 2 * 4);
        assert_eq!(DescriptorDB::from_bytes(&d.to_bytes().unwrap()).unwrap(), d);
        assert!(DescriptorDB::new(&Tensor::from_f32(&[1, 2], vec![2.0, 0.0]).unwrap(), vec![0]).is_err());
    }
}
