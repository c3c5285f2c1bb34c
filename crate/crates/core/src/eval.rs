//! Correspondence metrics, pseudo clustering for dense clouds, the
//! normalizer benchmark, and the CSV formats they read and write.

use std::path::Path;
use std::time::Instant;

use rand::Rng;

use crate::autograd::Tensor;
use crate::cloud::geometry::fps_sample;
use crate::cloud::{dist, dist_sq, synth, PointCloud, ShapePair};
use crate::error::{Error, Result};
use crate::indicator::{desmooth_values, sinkhorn_values, DeSmoothConfig};
use crate::model::CorrNet3D;

/// Fraction of rows with `pred[i] == gt[i]`.
pub fn corr_strict(pred: &[usize], gt: &[usize]) -> Result<f64> {
    if pred.len() != gt.len() || pred.is_empty() {
        return Err(Error::Contract(format!(
            "prediction has {} rows, ground truth {}",
            pred.len(),
            gt.len()
        )));
    }
    let hits = pred.iter().zip(gt).filter(|(p, g)| p == g).count();
    Ok(hits as f64 / pred.len() as f64)
}

/// `0, 0.01, ..., 0.20`.
pub fn default_tolerances() -> Vec<f64> {
    (0..=20).map(|i| i as f64 / 100.0).collect()
}

/// Fraction of rows whose predicted target lies within `eps * dist_max` of
/// the true one, for each `eps`; `dist_max` is the target cloud's diameter.
pub fn corr_tolerant(pred: &[usize], gt: &[usize], target: &PointCloud, tolerances: &[f64]) -> Result<Vec<(f64, f64)>> {
    corr_tolerant_with(pred, gt, target, target.diameter(), tolerances)
}

fn corr_tolerant_with(pred: &[usize], gt: &[usize], target: &PointCloud, dist_max: f64, tolerances: &[f64]) -> Result<Vec<(f64, f64)>> {
    if tolerances.is_empty() {
        return Err(Error::Contract("empty tolerance list".into()));
    }
    if tolerances.windows(2).any(|w| w[0] > w[1]) || tolerances.iter().any(|t| !(0.0..=1.0).contains(t)) {
        return Err(Error::Contract("tolerances must be ascending within [0, 1]".into()));
    }
    corr_strict(pred, gt)?;
    let n = target.len();
    if let Some(&bad) = pred.iter().chain(gt).find(|&&j| j >= n) {
        return Err(Error::Contract(format!("index {bad} outside target cloud of {n} points")));
    }
    let errors: Vec<f64> = pred
        .iter()
        .zip(gt)
        .map(|(&p, &g)| if p == g { 0.0 } else { dist(target.point(p), target.point(g)) })
        .collect();
    Ok(tolerances
        .iter()
        .map(|&eps| {
            let radius = eps * dist_max;
            let ok = errors.iter().filter(|&&e| e <= radius).count();
            (eps, ok as f64 / errors.len() as f64)
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorrReport {
    pub strict: f64,
    pub curve: Vec<(f64, f64)>,
    pub n: usize,
    pub dist_max: f64,
}

impl CorrReport {
    pub fn new(pred: &[usize], gt: &[usize], target: &PointCloud, tolerances: &[f64]) -> Result<Self> {
        let dist_max = target.diameter();
        Ok(CorrReport {
            strict: corr_strict(pred, gt)?,
            curve: corr_tolerant_with(pred, gt, target, dist_max, tolerances)?,
            n: pred.len(),
            dist_max,
        })
    }

    /// Curve value at the largest tolerance not above `eps`.
    pub fn at(&self, eps: f64) -> f64 {
        self.curve
            .iter()
            .take_while(|(t, _)| *t <= eps + 1e-12)
            .last()
            .map_or(0.0, |(_, c)| *c)
    }

    /// Point-wise mean of several reports over the same tolerance grid.
    pub fn mean(reports: &[CorrReport]) -> Result<CorrReport> {
        let first = reports.first().ok_or_else(|| Error::Contract("no reports to average".into()))?;
        let k = reports.len() as f64;
        let mut curve = first.curve.clone();
        for (i, point) in curve.iter_mut().enumerate() {
            point.1 = reports.iter().map(|r| r.curve[i].1).sum::<f64>() / k;
        }
        Ok(CorrReport {
            strict: reports.iter().map(|r| r.strict).sum::<f64>() / k,
            curve,
            n: first.n,
            dist_max: reports.iter().map(|r| r.dist_max).sum::<f64>() / k,
        })
    }
}

/// Mean report of a model's hard predictions over labelled pairs.
pub fn evaluate_model(model: &CorrNet3D, pairs: &[ShapePair], tolerances: &[f64]) -> Result<CorrReport> {
    let reports = pairs
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let gt = p
                .ground_truth
                .as_deref()
                .ok_or_else(|| Error::Contract(format!("pair {i} has no ground truth")))?;
            let hard = model.predict(&p.source, &p.target)?.hard.expect("predict quantizes");
            CorrReport::new(&hard, gt, &p.target, tolerances)
        })
        .collect::<Result<Vec<_>>>()?;
    CorrReport::mean(&reports)
}

/// Dense points grouped around FPS key points.
#[derive(Clone, Debug, PartialEq)]
pub struct ClusterMap {
    pub keys: Vec<usize>,
    /// Cluster (position in `keys`) of every point.
    pub assignment: Vec<usize>,
    /// Members of each cluster by ascending distance to its key, ties by
    /// index; the key itself comes first.
    pub members: Vec<Vec<usize>>,
}

impl ClusterMap {
    pub fn build(cloud: &PointCloud, m: usize) -> Result<Self> {
        let keys = fps_sample(cloud, m)?;
        Ok(ClusterMap::from_keys(cloud, keys))
    }

    pub fn from_keys(cloud: &PointCloud, keys: Vec<usize>) -> Self {
        let pts = cloud.points();
        let mut is_key = vec![None; pts.len()];
        for (c, &k) in keys.iter().enumerate() {
            is_key[k] = Some(c);
        }
        let mut assignment = Vec::with_capacity(pts.len());
        let mut members: Vec<Vec<(f64, usize)>> = vec![Vec::new(); keys.len()];
        for (i, p) in pts.iter().enumerate() {
            let c = is_key[i].unwrap_or_else(|| {
                let mut best = (f64::INFINITY, 0);
                for (c, &k) in keys.iter().enumerate() {
                    let d = dist_sq(*p, pts[k]);
                    if d < best.0 {
                        best = (d, c);
                    }
                }
                best.1
            });
            assignment.push(c);
            let d = if is_key[i].is_some() { -1.0 } else { dist_sq(*p, pts[keys[c]]) };
            members[c].push((d, i));
        }
        let members = members
            .into_iter()
            .map(|mut v| {
                v.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)));
                v.into_iter().map(|(_, i)| i).collect()
            })
            .collect();
        ClusterMap {
            keys,
            assignment,
            members,
        }
    }
}

/// Dense correspondence from a key-point model.
///
/// `model` receives the two key-point clouds and returns, for every source
/// key, the index of its target key. Points of equal rank in corresponded
/// clusters are matched; ranks missing on the target side fall back to the
/// target key point.
pub fn pseudo_cluster_correspond(
    source: &PointCloud,
    target: &PointCloud,
    m: usize,
    model: impl FnOnce(&PointCloud, &PointCloud) -> Result<Vec<usize>>,
) -> Result<Vec<usize>> {
    if source.len() != target.len() {
        return Err(Error::Contract(format!(
            "dense clouds differ in size: {} vs {}",
            source.len(),
            target.len()
        )));
    }
    if m < 2 || m > source.len() {
        return Err(Error::Contract(format!("need 2..={} key points, got {m}", source.len())));
    }
    let ca = ClusterMap::build(source, m)?;
    let cb = ClusterMap::build(target, m)?;
    let key_a = source.select(&ca.keys)?;
    let key_b = target.select(&cb.keys)?;
    let key_corr = model(&key_a, &key_b)?;
    if key_corr.len() != m || key_corr.iter().any(|&j| j >= m) {
        return Err(Error::Contract(format!("key correspondence must map {m} keys into 0..{m}")));
    }
    let mut out = vec![0; source.len()];
    for (i, cluster) in ca.members.iter().enumerate() {
        let j = key_corr[i];
        let target_cluster = &cb.members[j];
        for (rank, &p) in cluster.iter().enumerate() {
            out[p] = target_cluster.get(rank).copied().unwrap_or(cb.keys[j]);
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BenchMethod {
    DeSmooth,
    Sinkhorn,
}

impl BenchMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            BenchMethod::DeSmooth => "desmooth",
            BenchMethod::Sinkhorn => "sinkhorn",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub method: BenchMethod,
    pub n: usize,
    pub median_seconds: f64,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

/// Median wall time of both normalizers on a random similarity matrix per size.
pub fn bench_normalizers(sizes: &[usize], sinkhorn_iterations: usize, repeats: usize, seed: u64) -> Result<Vec<BenchRow>> {
    if sizes.iter().any(|&n| n < 2) || repeats == 0 || sinkhorn_iterations == 0 {
        return Err(Error::Contract("benchmark needs sizes >= 2 and positive repeats/iterations".into()));
    }
    let mut rng = synth::rng(seed);
    let cfg = DeSmoothConfig::default();
    let mut rows = Vec::with_capacity(2 * sizes.len());
    for &n in sizes {
        let s = Tensor::matrix(n, n, (0..n * n).map(|_| rng.random_range(0.5..2.0)).collect());
        let time = |f: &dyn Fn() -> Tensor| {
            let samples = (0..repeats)
                .map(|_| {
                    let start = Instant::now();
                    std::hint::black_box(f());
                    start.elapsed().as_secs_f64()
                })
                .collect();
            median(samples)
        };
        let d = time(&|| desmooth_values(std::hint::black_box(&s), &cfg));
        let k = time(&|| sinkhorn_values(std::hint::black_box(&s), sinkhorn_iterations));
        rows.push(BenchRow {
            method: BenchMethod::DeSmooth,
            n,
            median_seconds: d,
        });
        rows.push(BenchRow {
            method: BenchMethod::Sinkhorn,
            n,
            median_seconds: k,
        });
    }
    Ok(rows)
}

fn csv_writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::Writer::from_writer(file))
}

fn csv_reader(path: &Path) -> Result<csv::Reader<std::fs::File>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::Reader::from_reader(file))
}

fn check_header(reader: &mut csv::Reader<std::fs::File>, expected: &[&str]) -> Result<()> {
    let header = reader.headers()?;
    if header.iter().map(str::trim).ne(expected.iter().copied()) {
        return Err(Error::parse(1, format!("expected header {:?}, got {:?}", expected.join(","), header)));
    }
    Ok(())
}

fn field<T: std::str::FromStr>(record: &csv::StringRecord, i: usize) -> Result<T> {
    let line = record.position().map_or(0, |p| p.line() as usize);
    let raw = record.get(i).ok_or_else(|| Error::parse(line, "missing field"))?;
    raw.trim().parse().map_err(|_| Error::parse(line, format!("invalid value {raw:?}")))
}

/// `source_index,target_index`, one row per source point in order.
pub fn write_correspondence_csv(path: &Path, corr: &[usize]) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["source_index", "target_index"])?;
    for (i, j) in corr.iter().enumerate() {
        w.write_record([i.to_string(), j.to_string()])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads a correspondence file; rows may come in any order but must cover
/// every source index exactly once.
pub fn read_correspondence_csv(path: &Path) -> Result<Vec<usize>> {
    let mut r = csv_reader(path)?;
    check_header(&mut r, &["source_index", "target_index"])?;
    let mut pairs = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        pairs.push((field::<usize>(&rec, 0)?, field::<usize>(&rec, 1)?));
    }
    let n = pairs.len();
    let mut out = vec![None; n];
    for (i, j) in pairs {
        match out.get_mut(i) {
            Some(slot @ None) => *slot = Some(j),
            Some(Some(_)) => return Err(Error::Contract(format!("{}: source index {i} listed twice", path.display()))),
            None => return Err(Error::Contract(format!("{}: source index {i} out of range for {n} rows", path.display()))),
        }
    }
    Ok(out.into_iter().map(|j| j.expect("every slot filled")).collect())
}

/// `tolerance,corr`.
pub fn write_curve_csv(path: &Path, curve: &[(f64, f64)]) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["tolerance", "corr"])?;
    for (t, c) in curve {
        w.write_record([t.to_string(), c.to_string()])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_curve_csv(path: &Path) -> Result<Vec<(f64, f64)>> {
    let mut r = csv_reader(path)?;
    check_header(&mut r, &["tolerance", "corr"])?;
    r.records()
        .map(|rec| {
            let rec = rec?;
            Ok((field(&rec, 0)?, field(&rec, 1)?))
        })
        .collect()
}

/// True when the curve is non-decreasing in both columns.
pub fn curve_is_monotone(curve: &[(f64, f64)]) -> bool {
    curve.windows(2).all(|w| w[0].0 <= w[1].0 && w[0].1 <= w[1].1)
}

/// `method,n,median_seconds`.
pub fn write_bench_csv(path: &Path, rows: &[BenchRow]) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["method", "n", "median_seconds"])?;
    for r in rows {
        w.write_record([r.method.as_str().to_string(), r.n.to_string(), r.median_seconds.to_string()])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_bench_csv(path: &Path) -> Result<Vec<BenchRow>> {
    let mut r = csv_reader(path)?;
    check_header(&mut r, &["method", "n", "median_seconds"])?;
    r.records()
        .map(|rec| {
            let rec = rec?;
            let method = match rec.get(0).map(str::trim) {
                Some("desmooth") => BenchMethod::DeSmooth,
                Some("sinkhorn") => BenchMethod::Sinkhorn,
                other => {
                    let line = rec.position().map_or(0, |p| p.line() as usize);
                    return Err(Error::parse(line, format!("unknown method {other:?}")));
                }
            };
            Ok(BenchRow {
                method,
                n: field(&rec, 1)?,
                median_seconds: field(&rec, 2)?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cube() -> PointCloud {
        let mut pts = Vec::new();
        for i in 0..8u32 {
            pts.push([(i & 1) as f64, ((i >> 1) & 1) as f64, ((i >> 2) & 1) as f64]);
        }
        PointCloud::new(pts).unwrap()
    }

    #[test]
    fn strict_counts() {
        assert_eq!(corr_strict(&[0, 1, 2, 3], &[0, 1, 2, 3]).unwrap(), 1.0);
        assert_eq!(corr_strict(&[0, 1, 3, 2], &[0, 1, 2, 3]).unwrap(), 0.5);
        assert!(corr_strict(&[0], &[0, 1]).is_err());
    }

    #[test]
    fn cube_edge_threshold() {
        let c = cube();
        let gt: Vec<usize> = (0..8).collect();
        // each prediction off by exactly one edge (flip bit 0)
        let pred: Vec<usize> = (0..8).map(|i| i ^ 1).collect();
        let edge = 1.0 / 3f64.sqrt();
        let curve = corr_tolerant(&pred, &gt, &c, &[0.0, edge - 1e-9, edge, 1.0]).unwrap();
        assert_eq!(curve.iter().map(|p| p.1).collect::<Vec<_>>(), vec![0.0, 0.0, 1.0, 1.0]);
        assert!((c.diameter() - 3f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn tolerance_grid_checks() {
        let c = cube();
        let gt: Vec<usize> = (0..8).collect();
        assert!(corr_tolerant(&gt, &gt, &c, &[]).is_err());
        assert!(corr_tolerant(&gt, &gt, &c, &[0.2, 0.1]).is_err());
        assert_eq!(default_tolerances().len(), 21);
        let report = CorrReport::new(&gt, &gt, &c, &default_tolerances()).unwrap();
        assert_eq!(report.at(0.2), 1.0);
    }

    #[test]
    fn cluster_keys_rank_first() {
        let pts: Vec<[f64; 3]> = (0..10).map(|i| [i as f64, 0.0, 0.0]).collect();
        let pc = PointCloud::new(pts).unwrap();
        let map = ClusterMap::build(&pc, 3).unwrap();
        assert_eq!(map.keys, vec![0, 9, 4]);
        for (c, m) in map.members.iter().enumerate() {
            assert_eq!(m[0], map.keys[c]);
        }
        let total: usize = map.members.iter().map(Vec::len).sum();
        assert_eq!(total, 10);
    }

    #[test]
    fn self_pair_identity_is_identity() {
        let pts: Vec<[f64; 3]> = (0..30).map(|i| [(i as f64 * 0.37).sin(), (i as f64 * 0.11).cos(), i as f64 * 0.05]).collect();
        let pc = PointCloud::new(pts).unwrap();
        let out = pseudo_cluster_correspond(&pc, &pc, 5, |a, _| Ok((0..a.len()).collect())).unwrap();
        assert_eq!(out, (0..30).collect::<Vec<_>>());
    }

    #[test]
    fn median_even_and_odd() {
        assert_eq!(median(vec![3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(vec![4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn csv_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("corr.csv");
        write_correspondence_csv(&p, &[2, 0, 1]).unwrap();
        assert_eq!(std::fs::read_to_string(&p).unwrap(), "source_index,target_index\n0,2\n1,0\n2,1\n");
        assert_eq!(read_correspondence_csv(&p).unwrap(), vec![2, 0, 1]);
        let c = dir.path().join("curve.csv");
        let curve = vec![(0.0, 0.25), (0.1, 0.5)];
        write_curve_csv(&c, &curve).unwrap();
        assert_eq!(read_curve_csv(&c).unwrap(), curve);
        let b = dir.path().join("bench.csv");
        let rows = vec![BenchRow {
            method: BenchMethod::Sinkhorn,
            n: 8,
            median_seconds: 1.5e-6,
        }];
        write_bench_csv(&b, &rows).unwrap();
        assert_eq!(read_bench_csv(&b).unwrap(), rows);
    }

    #[test]
    fn correspondence_reader_rejects_duplicates() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.csv");
        std::fs::write(&p, "source_index,target_index\n0,1\n0,0\n").unwrap();
        assert!(read_correspondence_csv(&p).is_err());
        std::fs::write(&p, "a,b\n0,1\n").unwrap();
        assert!(matches!(read_correspondence_csv(&p), Err(Error::Parse { .. })));
    }
}
