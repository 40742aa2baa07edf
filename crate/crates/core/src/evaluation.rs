//! Count metrics, localisation scoring and CSV report export.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Width of the error histogram bins, in counts.
pub const ERROR_BIN_WIDTH: f64 = 5.0;

/// `(ground_truth, predicted)` per sample.
pub type PairedCounts = [(f64, f64)];

fn non_empty(pairs: &PairedCounts) -> Result<()> {
    if pairs.is_empty() {
        return Err(Error::EmptyInput("paired counts"));
    }
    Ok(())
}

pub fn mae(pairs: &PairedCounts) -> Result<f64> {
    non_empty(pairs)?;
    Ok(pairs.iter().map(|(y, x)| (y - x).abs()).sum::<f64>() / pairs.len() as f64)
}

pub fn rmse(pairs: &PairedCounts) -> Result<f64> {
    non_empty(pairs)?;
    Ok((pairs.iter().map(|(y, x)| (y - x) * (y - x)).sum::<f64>() / pairs.len() as f64).sqrt())
}

/// Mean relative surplus and deficit, in percent of the true count.
pub fn fp_fn_count_based(pairs: &PairedCounts) -> Result<(f64, f64)> {
    non_empty(pairs)?;
    if let Some(index) = pairs.iter().position(|&(y, _)| y <= 0.0) {
        return Err(Error::ZeroGroundTruth { index });
    }
    let n = pairs.len() as f64;
    let fp = pairs.iter().map(|&(y, x)| (x - y).max(0.0) / y).sum::<f64>() / n;
    let fn_ = pairs.iter().map(|&(y, x)| (y - x).max(0.0) / y).sum::<f64>() / n;
    Ok((100.0 * fp, 100.0 * fn_))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocalizedScore {
    pub false_positives: usize,
    pub false_negatives: usize,
    /// `(prediction index, keypoint index)` pairs.
    pub matches: Vec<(usize, usize)>,
}

/// Greedy one-to-one matching by ascending distance, within `match_radius`.
/// Column distances wrap around `width` when `wrap` is set.
pub fn fp_fn_localized(
    pred: &[[f64; 2]],
    gt: &[(f64, f64)],
    match_radius: f64,
    width: usize,
    wrap: bool,
) -> Result<LocalizedScore> {
    if !(match_radius > 0.0) {
        return Err(Error::InvalidConfig(format!("match radius must be positive, got {match_radius}")));
    }
    let w = width as f64;
    let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
    for (i, p) in pred.iter().enumerate() {
        for (j, g) in gt.iter().enumerate() {
            let dr = p[0] - g.0;
            let mut dc = (p[1] - g.1).abs();
            if wrap {
                dc = dc.min(w - dc);
            }
            let d = (dr * dr + dc * dc).sqrt();
            if d <= match_radius {
                pairs.push((d, i, j));
            }
        }
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let (mut used_p, mut used_g) = (vec![false; pred.len()], vec![false; gt.len()]);
    let mut matches = Vec::new();
    for (_, i, j) in pairs {
        if !used_p[i] && !used_g[j] {
            used_p[i] = true;
            used_g[j] = true;
            matches.push((i, j));
        }
    }
    Ok(LocalizedScore {
        false_positives: pred.len() - matches.len(),
        false_negatives: gt.len() - matches.len(),
        matches,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub method: String,
    pub n: usize,
    pub mae: f64,
    pub rmse: f64,
    pub fp_pct: f64,
    pub fn_pct: f64,
}

impl MetricsReport {
    pub fn compute(method: &str, pairs: &PairedCounts) -> Result<Self> {
        let (fp_pct, fn_pct) = fp_fn_count_based(pairs)?;
        Ok(Self {
            method: method.to_string(),
            n: pairs.len(),
            mae: mae(pairs)?,
            rmse: rmse(pairs)?,
            fp_pct,
            fn_pct,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Regression {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
}

/// Least-squares line `pred = slope * gt + intercept`. `r2` is zero when either
/// variable has no variance.
pub fn regression(pairs: &PairedCounts) -> Result<Regression> {
    if pairs.len() < 2 {
        return Err(Error::DatasetTooSmall { got: pairs.len(), need: 2 });
    }
    let n = pairs.len() as f64;
    let mx = pairs.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pairs.iter().map(|p| p.1).sum::<f64>() / n;
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    for &(x, y) in pairs {
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
        sxy += (x - mx) * (y - my);
    }
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    let r2 = if sxx > 0.0 && syy > 0.0 { sxy * sxy / (sxx * syy) } else { 0.0 };
    Ok(Regression {
        slope,
        intercept: my - slope * mx,
        r2,
    })
}

/// Histogram of `pred - gt` as `(bin_start, count)`, covering every bin from
/// the lowest to the highest occupied one.
pub fn error_histogram(pairs: &PairedCounts) -> Vec<(f64, usize)> {
    if pairs.is_empty() {
        return Vec::new();
    }
    let bins: Vec<i64> = pairs
        .iter()
        .map(|&(y, x)| ((x - y) / ERROR_BIN_WIDTH).floor() as i64)
        .collect();
    let (lo, hi) = (*bins.iter().min().expect("non-empty"), *bins.iter().max().expect("non-empty"));
    (lo..=hi)
        .map(|b| (b as f64 * ERROR_BIN_WIDTH, bins.iter().filter(|&&x| x == b).count()))
        .collect()
}

/// Per-method paired counts feeding a report.
#[derive(Clone, Debug, PartialEq)]
pub struct MethodResults {
    pub method: String,
    pub pairs: Vec<(f64, f64)>,
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes `metrics.csv`, `scatter.csv`, `errors.csv` and `regression.csv`
/// into `dir` and returns the metric rows.
pub fn export_report(dir: &Path, results: &[MethodResults]) -> Result<Vec<MetricsReport>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut metrics = String::from("method,mae,rmse,fp,fn\n");
    let mut scatter = String::from("gt,pred,method\n");
    let mut errors = String::from("method,bin_start,bin_end,count\n");
    let mut reg = String::from("method,slope,intercept,r2\n");
    let mut reports = Vec::new();
    for r in results {
        let m = MetricsReport::compute(&r.method, &r.pairs)?;
        let _ = writeln!(metrics, "{},{},{},{},{}", m.method, m.mae, m.rmse, m.fp_pct, m.fn_pct);
        for (y, x) in &r.pairs {
            let _ = writeln!(scatter, "{y},{x},{}", r.method);
        }
        for (start, count) in error_histogram(&r.pairs) {
            let _ = writeln!(errors, "{},{start},{},{count}", r.method, start + ERROR_BIN_WIDTH);
        }
        let g = regression(&r.pairs)?;
        let _ = writeln!(reg, "{},{},{},{}", r.method, g.slope, g.intercept, g.r2);
        reports.push(m);
    }
    write_file(&dir.join("metrics.csv"), &metrics)?;
    write_file(&dir.join("scatter.csv"), &scatter)?;
    write_file(&dir.join("errors.csv"), &errors)?;
    write_file(&dir.join("regression.csv"), &reg)?;
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn mae_rmse_examples() {
        let p = [(12.0, 10.0), (8.0, 8.0)];
        assert_eq!(mae(&p).unwrap(), 1.0);
        assert!((rmse(&p).unwrap() - 2f64.sqrt()).abs() < 1e-15);
        let same = [(3.0, 3.0), (5.0, 5.0)];
        assert_eq!((mae(&same).unwrap(), rmse(&same).unwrap()), (0.0, 0.0));
        assert!(matches!(mae(&[]), Err(Error::EmptyInput(_))));
    }

    #[test]
    fn fp_fn_examples() {
        let (fp, fn_) = fp_fn_count_based(&[(100.0, 110.0)]).unwrap();
        assert!((fp - 10.0).abs() < 1e-12 && fn_ == 0.0);
        let (fp, fn_) = fp_fn_count_based(&[(100.0, 90.0)]).unwrap();
        assert!(fp == 0.0 && (fn_ - 10.0).abs() < 1e-12);
        assert_eq!(fp_fn_count_based(&[(4.0, 4.0)]).unwrap(), (0.0, 0.0));
        assert!(matches!(
            fp_fn_count_based(&[(4.0, 4.0), (0.0, 1.0)]),
            Err(Error::ZeroGroundTruth { index: 1 })
        ));
    }

    #[test]
    fn localized_examples() {
        let gt = vec![(1.0, 1.0), (5.0, 5.0)];
        let pred = vec![[1.0, 1.0], [5.0, 5.0]];
        let s = fp_fn_localized(&pred, &gt, 2.0, 10, false).unwrap();
        assert_eq!((s.false_positives, s.false_negatives), (0, 0));
        let mut extra = pred.clone();
        extra.push([8.0, 8.0]);
        let s = fp_fn_localized(&extra, &gt, 2.0, 10, false).unwrap();
        assert_eq!((s.false_positives, s.false_negatives), (1, 0));
        let seam = fp_fn_localized(&[[0.0, 0.5]], &[(0.0, 9.5)], 1.5, 10, true).unwrap();
        assert_eq!(seam.matches, vec![(0, 0)]);
        assert!(fp_fn_localized(&pred, &gt, 0.0, 10, false).is_err());
    }

    /// Largest matching within the radius by exhaustive search.
    fn best_matching(pred: &[[f64; 2]], gt: &[(f64, f64)], radius: f64) -> usize {
        fn go(i: usize, pred: &[[f64; 2]], gt: &[(f64, f64)], used: &mut Vec<bool>, radius: f64) -> usize {
            if i == pred.len() {
                return 0;
            }
            let mut best = go(i + 1, pred, gt, used, radius);
            for j in 0..gt.len() {
                let d = ((pred[i][0] - gt[j].0).powi(2) + (pred[i][1] - gt[j].1).powi(2)).sqrt();
                if !used[j] && d <= radius {
                    used[j] = true;
                    best = best.max(1 + go(i + 1, pred, gt, used, radius));
                    used[j] = false;
                }
            }
            best
        }
        go(0, pred, gt, &mut vec![false; gt.len()], radius)
    }

    #[test]
    fn jittered_copies_match_fully() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let radius = 3.0;
        // points on a coarse lattice stay farther apart than twice the radius
        let gt: Vec<(f64, f64)> = (0..30).map(|i| ((i / 6) as f64 * 10.0, (i % 6) as f64 * 10.0)).collect();
        let pred: Vec<[f64; 2]> = gt
            .iter()
            .map(|g| [g.0 + rng.gen_range(-1.0..1.0), g.1 + rng.gen_range(-1.0..1.0)])
            .collect();
        let s = fp_fn_localized(&pred, &gt, radius, 1000, false).unwrap();
        assert_eq!(s.matches.len(), 30);
        for start in [0, 10, 20] {
            let (p, g) = (&pred[start..start + 10], &gt[start..start + 10]);
            let greedy = fp_fn_localized(p, g, radius, 1000, false).unwrap().matches.len();
            assert_eq!(greedy, best_matching(p, g, radius));
        }
    }

    #[test]
    fn regression_cases() {
        let perfect = [(1.0, 1.0), (2.0, 2.0), (5.0, 5.0)];
        let r = regression(&perfect).unwrap();
        assert_eq!((r.slope, r.intercept, r.r2), (1.0, 0.0, 1.0));
        let constant = [(1.0, 4.0), (2.0, 4.0), (5.0, 4.0)];
        let r = regression(&constant).unwrap();
        assert_eq!((r.slope, r.intercept, r.r2), (0.0, 4.0, 0.0));
        assert!(regression(&[(1.0, 1.0)]).is_err());
    }

    #[test]
    fn regression_matches_normal_equations() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let pairs: Vec<(f64, f64)> = (0..40)
            .map(|_| {
                let x = rng.gen_range(100.0..300.0);
                (x, 0.8 * x + 12.0 + rng.gen_range(-10.0..10.0))
            })
            .collect();
        // [n sx; sx sxx] [b; a] = [sy; sxy]
        let n = pairs.len() as f64;
        let sx: f64 = pairs.iter().map(|p| p.0).sum();
        let sy: f64 = pairs.iter().map(|p| p.1).sum();
        let sxx: f64 = pairs.iter().map(|p| p.0 * p.0).sum();
        let sxy: f64 = pairs.iter().map(|p| p.0 * p.1).sum();
        let det = n * sxx - sx * sx;
        let a = (n * sxy - sx * sy) / det;
        let b = (sxx * sy - sx * sxy) / det;
        let r = regression(&pairs).unwrap();
        assert!((r.slope - a).abs() < 1e-9 && (r.intercept - b).abs() < 1e-7);
        let pred_mean = sy / n;
        let ss_tot: f64 = pairs.iter().map(|p| (p.1 - pred_mean).powi(2)).sum();
        let ss_res: f64 = pairs.iter().map(|p| (p.1 - (a * p.0 + b)).powi(2)).sum();
        assert!((r.r2 - (1.0 - ss_res / ss_tot)).abs() < 1e-9);
    }

    #[test]
    fn report_files() {
        let dir = tempfile::tempdir().unwrap();
        let results = vec![
            MethodResults { method: "gnet".into(), pairs: vec![(10.0, 10.0), (20.0, 20.0)] },
            MethodResults { method: "nms".into(), pairs: vec![(10.0, 17.0), (20.0, 12.0)] },
        ];
        let reports = export_report(dir.path(), &results).unwrap();
        assert_eq!(reports[0].mae, 0.0);
        let metrics = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
        assert!(metrics.starts_with("method,mae,rmse,fp,fn\ngnet,0,0,0,0\n"));
        let errors = std::fs::read_to_string(dir.path().join("errors.csv")).unwrap();
        assert!(errors.contains("nms,-10,-5,1\n") && errors.contains("nms,5,10,1\n"));
        let first = std::fs::read(dir.path().join("scatter.csv")).unwrap();
        export_report(dir.path(), &results).unwrap();
        assert_eq!(std::fs::read(dir.path().join("scatter.csv")).unwrap(), first);
    }

    proptest! {
        #[test]
        fn metric_invariants(pairs in proptest::collection::vec((1.0f64..500.0, 0.0f64..600.0), 1..30)) {
            let m = mae(&pairs).unwrap();
            let r = rmse(&pairs).unwrap();
            prop_assert!(r + 1e-9 >= m && m >= 0.0);
            let mut rev = pairs.clone();
            rev.reverse();
            prop_assert!((mae(&rev).unwrap() - m).abs() < 1e-9);
            prop_assert!((rmse(&rev).unwrap() - r).abs() < 1e-9);
            let (fp, fn_) = fp_fn_count_based(&pairs).unwrap();
            let signed = pairs.iter().map(|(y, x)| (x - y) / y).sum::<f64>();
            prop_assert!((fp - fn_) * signed >= 0.0 || (fp - fn_).abs() < 1e-9);
            let hist: usize = error_histogram(&pairs).iter().map(|b| b.1).sum();
            prop_assert_eq!(hist, pairs.len());
        }

        #[test]
        fn localized_self_match(pts in proptest::collection::vec((0.0f64..50.0, 0.0f64..50.0), 0..20)) {
            let pred: Vec<[f64; 2]> = pts.iter().map(|p| [p.0, p.1]).collect();
            let s = fp_fn_localized(&pred, &pts, 0.5, 50, true).unwrap();
            prop_assert_eq!((s.false_positives, s.false_negatives), (0, 0));
        }
    }
}
