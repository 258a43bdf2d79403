//! Dice and average symmetric surface distance, per-case evaluation, and
//! per-domain aggregation.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{CddsaError, Result};

/// A binary mask stored row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<bool>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != height * width {
            return Err(CddsaError::Shape(format!("{} mask values for {height}x{width}", data.len())));
        }
        Ok(BinaryMask { height, width, data })
    }

    /// Pixels equal to `class` in a label map.
    pub fn from_labels(labels: &[u8], height: usize, width: usize, class: u8) -> Result<Self> {
        Self::new(height, width, labels.iter().map(|&l| l == class).collect())
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    fn at(&self, r: isize, c: isize) -> bool {
        r >= 0 && c >= 0 && (r as usize) < self.height && (c as usize) < self.width && self.data[r as usize * self.width + c as usize]
    }

    /// Foreground pixels with a background 4-neighbour; pixels outside the
    /// image count as background.
    pub fn surface(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for r in 0..self.height {
            for c in 0..self.width {
                let (ri, ci) = (r as isize, c as isize);
                if self.at(ri, ci) && [(-1, 0), (1, 0), (0, -1), (0, 1)].iter().any(|(dr, dc)| !self.at(ri + dr, ci + dc)) {
                    out.push((r, c));
                }
            }
        }
        out
    }
}

fn same_shape(a: &BinaryMask, b: &BinaryMask) -> Result<()> {
    if (a.height, a.width) != (b.height, b.width) {
        return Err(CddsaError::Shape(format!("masks {}x{} and {}x{}", a.height, a.width, b.height, b.width)));
    }
    Ok(())
}

/// `100 · 2|P∩G| / (|P|+|G|)`; 100 when both are empty.
pub fn dice_score(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    same_shape(pred, gt)?;
    let inter = pred.data.iter().zip(&gt.data).filter(|(p, g)| **p && **g).count();
    let total = pred.count() + gt.count();
    if total == 0 {
        return Ok(100.0);
    }
    Ok(100.0 * 2.0 * inter as f64 / total as f64)
}

const INF: f64 = f64::INFINITY;

/// Lower envelope of parabolas `f[q] + (s·(p−q))²`, evaluated in place.
fn edt_1d(f: &mut [f64], s: f64, v: &mut [usize], z: &mut [f64], out: &mut [f64]) {
    let n = f.len();
    let s2 = s * s;
    let mut k = 0usize;
    let first = match f.iter().position(|x| x.is_finite()) {
        Some(i) => i,
        None => return,
    };
    v[0] = first;
    z[0] = -INF;
    z[1] = INF;
    for q in first + 1..n {
        if !f[q].is_finite() {
            continue;
        }
        loop {
            let p = v[k];
            let (qf, pf) = (q as f64, p as f64);
            let x = ((f[q] + s2 * qf * qf) - (f[p] + s2 * pf * pf)) / (2.0 * s2 * (qf - pf));
            // z[0] = -inf, so this pops at most down to the first parabola
            if x <= z[k] {
                k -= 1;
            } else {
                k += 1;
                v[k] = q;
                z[k] = x;
                z[k + 1] = INF;
                break;
            }
        }
    }
    let mut k = 0;
    for q in 0..n {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let d = s * (q as f64 - v[k] as f64);
        out[q] = d * d + f[v[k]];
    }
    f.copy_from_slice(out);
}

/// Squared Euclidean distance from every pixel to the nearest `sites` pixel,
/// with `spacing = (row, column)` physical pixel sizes.
pub fn squared_distance_map(height: usize, width: usize, sites: &[(usize, usize)], spacing: (f64, f64)) -> Vec<f64> {
    let mut grid = vec![INF; height * width];
    for &(r, c) in sites {
        grid[r * width + c] = 0.0;
    }
    if sites.is_empty() {
        return grid;
    }
    let n = height.max(width);
    let (mut v, mut z, mut out) = (vec![0usize; n], vec![0.0; n + 1], vec![0.0; n]);
    let mut col = vec![0.0; height];
    for c in 0..width {
        for r in 0..height {
            col[r] = grid[r * width + c];
        }
        edt_1d(&mut col, spacing.0, &mut v, &mut z, &mut out[..height]);
        for r in 0..height {
            grid[r * width + c] = col[r];
        }
    }
    for r in 0..height {
        let row = &mut grid[r * width..(r + 1) * width];
        edt_1d(row, spacing.1, &mut v, &mut z, &mut out[..width]);
    }
    grid
}

/// Average symmetric surface distance; `None` when either mask is empty.
pub fn assd(pred: &BinaryMask, gt: &BinaryMask, spacing: (f64, f64)) -> Result<Option<f64>> {
    same_shape(pred, gt)?;
    if !(spacing.0 > 0.0 && spacing.1 > 0.0) {
        return Err(CddsaError::Config(format!("spacing must be positive, got {spacing:?}")));
    }
    let (sp, sg) = (pred.surface(), gt.surface());
    if sp.is_empty() || sg.is_empty() {
        return Ok(None);
    }
    let (h, w) = (pred.height, pred.width);
    let to_g = squared_distance_map(h, w, &sg, spacing);
    let to_p = squared_distance_map(h, w, &sp, spacing);
    let sum_pg: f64 = sp.iter().map(|&(r, c)| to_g[r * w + c].sqrt()).sum();
    let sum_gp: f64 = sg.iter().map(|&(r, c)| to_p[r * w + c].sqrt()).sum();
    Ok(Some((sum_pg + sum_gp) / (sp.len() + sg.len()) as f64))
}

/// Metrics of one foreground class of one case.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseMetric {
    pub case_id: String,
    pub domain_id: usize,
    pub class: u8,
    pub dice_percent: f64,
    /// Empty when undefined (an empty mask).
    pub assd: Option<f64>,
}

/// Dice and ASSD of every foreground class `1..k` of one predicted label map.
pub fn evaluate_case(
    case_id: &str,
    domain_id: usize,
    pred: &[u8],
    gt: &[u8],
    height: usize,
    width: usize,
    num_classes: usize,
    spacing: (f64, f64),
) -> Result<Vec<CaseMetric>> {
    (1..num_classes as u8)
        .map(|class| {
            let p = BinaryMask::from_labels(pred, height, width, class)?;
            let g = BinaryMask::from_labels(gt, height, width, class)?;
            Ok(CaseMetric {
                case_id: case_id.to_string(),
                domain_id,
                class,
                dice_percent: dice_score(&p, &g)?,
                assd: assd(&p, &g, spacing)?,
            })
        })
        .collect()
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> Option<(f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let m = values.iter().sum::<f64>() / n;
    let v = values.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
    Some((m, v.sqrt()))
}

/// Mean pairwise cosine similarity of style codes within and across domains.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StyleSeparation {
    pub intra: f64,
    pub inter: f64,
}

impl StyleSeparation {
    pub fn gap(&self) -> f64 {
        self.intra - self.inter
    }
}

fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(CddsaError::Validation("cosine similarity of a zero vector".into()));
    }
    Ok(dot / (na * nb))
}

/// Averages cosine similarity over all unordered pairs `i < j`, split by
/// whether the two codes share a domain.
pub fn style_separation(codes: &[Vec<f64>], domains: &[usize]) -> Result<StyleSeparation> {
    if codes.len() != domains.len() {
        return Err(CddsaError::Shape(format!("{} codes for {} domain labels", codes.len(), domains.len())));
    }
    let (mut intra, mut inter) = ((0.0, 0usize), (0.0, 0usize));
    for i in 0..codes.len() {
        for j in i + 1..codes.len() {
            let c = cosine(&codes[i], &codes[j])?;
            let acc = if domains[i] == domains[j] { &mut intra } else { &mut inter };
            acc.0 += c;
            acc.1 += 1;
        }
    }
    if intra.1 == 0 || inter.1 == 0 {
        return Err(CddsaError::Validation("need at least two domains with two codes each".into()));
    }
    Ok(StyleSeparation { intra: intra.0 / intra.1 as f64, inter: inter.0 / inter.1 as f64 })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupStat {
    /// `None` for the pooled row.
    pub domain_id: Option<usize>,
    pub class: u8,
    pub cases: usize,
    pub dice_mean: f64,
    pub dice_std: f64,
    pub assd_mean: Option<f64>,
    pub assd_std: Option<f64>,
    /// Cases whose ASSD was undefined and left out of the ASSD mean.
    pub assd_undefined: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_case: Vec<CaseMetric>,
    pub per_domain: Vec<GroupStat>,
    pub overall: Vec<GroupStat>,
}

fn group_stat(domain_id: Option<usize>, class: u8, rows: &[&CaseMetric]) -> GroupStat {
    let dice: Vec<f64> = rows.iter().map(|r| r.dice_percent).collect();
    let assd: Vec<f64> = rows.iter().filter_map(|r| r.assd).collect();
    let (dice_mean, dice_std) = mean_std(&dice).unwrap_or((f64::NAN, f64::NAN));
    let a = mean_std(&assd);
    let undefined = rows.len() - assd.len();
    if undefined > 0 {
        log::info!("class {class} domain {domain_id:?}: {undefined} case(s) with undefined ASSD excluded");
    }
    GroupStat {
        domain_id,
        class,
        cases: rows.len(),
        dice_mean,
        dice_std,
        assd_mean: a.map(|x| x.0),
        assd_std: a.map(|x| x.1),
        assd_undefined: undefined,
    }
}

pub fn aggregate(per_case: Vec<CaseMetric>) -> Result<MetricsReport> {
    if per_case.is_empty() {
        return Err(CddsaError::Validation("cannot aggregate an empty set of cases".into()));
    }
    if let Some(bad) = per_case.iter().find(|c| !(0.0..=100.0).contains(&c.dice_percent) || c.assd.is_some_and(|a| !(a >= 0.0))) {
        return Err(CddsaError::Validation(format!("metric out of range for case {}", bad.case_id)));
    }
    let mut by_domain: BTreeMap<(usize, u8), Vec<&CaseMetric>> = BTreeMap::new();
    let mut by_class: BTreeMap<u8, Vec<&CaseMetric>> = BTreeMap::new();
    for c in &per_case {
        by_domain.entry((c.domain_id, c.class)).or_default().push(c);
        by_class.entry(c.class).or_default().push(c);
    }
    let per_domain = by_domain.iter().map(|(&(d, k), rows)| group_stat(Some(d), k, rows)).collect();
    let overall = by_class.iter().map(|(&k, rows)| group_stat(None, k, rows)).collect();
    Ok(MetricsReport { per_case, per_domain, overall })
}

pub const CSV_HEADER: [&str; 5] = ["case_id", "domain_id", "class", "dice_percent", "assd"];

impl MetricsReport {
    /// Mean foreground Dice over all rows.
    pub fn mean_dice(&self) -> f64 {
        self.per_case.iter().map(|c| c.dice_percent).sum::<f64>() / self.per_case.len() as f64
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
        w.write_record(CSV_HEADER).map_err(|e| csv_err(path, e))?;
        for c in &self.per_case {
            let assd = c.assd.map_or_else(String::new, |a| format!("{a}"));
            w.write_record([c.case_id.clone(), c.domain_id.to_string(), c.class.to_string(), format!("{}", c.dice_percent), assd])
                .map_err(|e| csv_err(path, e))?;
        }
        w.flush().map_err(|e| CddsaError::io(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
        let header = r.headers().map_err(|e| csv_err(path, e))?.clone();
        if header.iter().collect::<Vec<_>>() != CSV_HEADER {
            return Err(CddsaError::ingest(path, format!("unexpected header {header:?}")));
        }
        let mut rows = Vec::new();
        for rec in r.deserialize() {
            let row: CaseMetric = rec.map_err(|e| csv_err(path, e))?;
            rows.push(row);
        }
        aggregate(rows)
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<8} {:>5} {:>5} {:>16} {:>16} {:>9}", "domain", "class", "cases", "dice (%)", "assd", "no-assd");
        for g in self.per_domain.iter().chain(&self.overall) {
            let d = g.domain_id.map_or_else(|| "all".to_string(), |d| d.to_string());
            let assd = match (g.assd_mean, g.assd_std) {
                (Some(m), Some(sd)) => format!("{m:.3}±{sd:.3}"),
                _ => "undefined".to_string(),
            };
            let dice = format!("{:.2}±{:.2}", g.dice_mean, g.dice_std);
            let _ = writeln!(s, "{d:<8} {:>5} {:>5} {dice:>16} {assd:>16} {:>9}", g.class, g.cases, g.assd_undefined);
        }
        s
    }
}

fn csv_err(path: &Path, e: csv::Error) -> CddsaError {
    CddsaError::ingest(path, e.to_string())
}

/// Paired two-sided Wilcoxon signed-rank test.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WilcoxonResult {
    /// Pairs with a non-zero difference.
    pub n: usize,
    /// Sum of ranks of positive differences (`a > b`).
    pub w_plus: f64,
    pub p_value: f64,
}

/// Zero differences are dropped and tied magnitudes share their mean rank.
/// The p-value is exact for up to 25 untied pairs and otherwise uses the
/// normal approximation with tie and continuity corrections.
pub fn wilcoxon_signed_rank(a: &[f64], b: &[f64]) -> Result<WilcoxonResult> {
    if a.len() != b.len() {
        return Err(CddsaError::Shape("paired samples differ in length".into()));
    }
    let mut d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).filter(|v| *v != 0.0).collect();
    let n = d.len();
    if n == 0 {
        return Ok(WilcoxonResult { n, w_plus: 0.0, p_value: 1.0 });
    }
    d.sort_by(|x, y| x.abs().total_cmp(&y.abs()));
    let mut ranks = vec![0.0; n];
    let mut tie_term = 0.0;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && d[j + 1].abs() == d[i].abs() {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        ranks[i..=j].iter_mut().for_each(|x| *x = r);
        let t = (j - i + 1) as f64;
        tie_term += t * t * t - t;
        i = j + 1;
    }
    let w_plus: f64 = d.iter().zip(&ranks).filter(|(v, _)| **v > 0.0).map(|(_, r)| r).sum();
    let total = (n * (n + 1)) as f64 / 2.0;
    let p_value = if n <= 25 && tie_term == 0.0 {
        // counts[s] = number of sign patterns with positive-rank sum s
        let max = n * (n + 1) / 2;
        let mut counts = vec![0f64; max + 1];
        counts[0] = 1.0;
        for r in 1..=n {
            for s in (r..=max).rev() {
                counts[s] += counts[s - r];
            }
        }
        let all = 2f64.powi(n as i32);
        let w = w_plus.min(total - w_plus).round() as usize;
        let tail: f64 = counts[..=w].iter().sum::<f64>() / all;
        (2.0 * tail).min(1.0)
    } else {
        let mean = total / 2.0;
        let var = (n * (n + 1) * (2 * n + 1)) as f64 / 24.0 - tie_term / 48.0;
        if var <= 0.0 {
            1.0
        } else {
            let z = ((w_plus - mean).abs() - 0.5).max(0.0) / var.sqrt();
            let normal = Normal::standard();
            (2.0 * (1.0 - normal.cdf(z))).min(1.0)
        }
    };
    Ok(WilcoxonResult { n, w_plus, p_value })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(h: usize, w: usize, on: &[(usize, usize)]) -> BinaryMask {
        let mut d = vec![false; h * w];
        for &(r, c) in on {
            d[r * w + c] = true;
        }
        BinaryMask::new(h, w, d).unwrap()
    }

    #[test]
    fn dice_cases() {
        let g = mask(4, 6, &[(1, 1), (1, 2), (1, 3), (1, 4), (2, 1), (2, 2), (2, 3), (2, 4)]);
        let p = mask(4, 6, &[(1, 1), (1, 2), (2, 1), (2, 2)]);
        assert!((dice_score(&p, &g).unwrap() - 100.0 * 8.0 / 12.0).abs() < 1e-12);
        assert_eq!(dice_score(&g, &g).unwrap(), 100.0);
        assert_eq!(dice_score(&p, &mask(4, 6, &[(3, 5)])).unwrap(), 0.0);
        assert_eq!(dice_score(&mask(2, 2, &[]), &mask(2, 2, &[])).unwrap(), 100.0);
        assert_eq!(dice_score(&mask(2, 2, &[(0, 0)]), &mask(2, 2, &[])).unwrap(), 0.0);
        assert!(dice_score(&mask(2, 2, &[]), &mask(2, 3, &[])).is_err());
    }

    #[test]
    fn assd_cases() {
        let a = mask(5, 5, &[(0, 1)]);
        let b = mask(5, 5, &[(3, 1)]);
        assert_eq!(assd(&a, &b, (1.0, 1.0)).unwrap(), Some(3.0));
        assert_eq!(assd(&a, &a, (1.0, 1.0)).unwrap(), Some(0.0));
        assert_eq!(assd(&a, &mask(5, 5, &[]), (1.0, 1.0)).unwrap(), None);
        assert_eq!(assd(&a, &b, (2.0, 1.0)).unwrap(), Some(6.0));
    }

    #[test]
    fn aggregate_two_cases() {
        let row = |id: &str, d: f64, dom: usize| CaseMetric { case_id: id.into(), domain_id: dom, class: 1, dice_percent: d, assd: None };
        let r = aggregate(vec![row("a", 80.0, 0), row("b", 90.0, 0)]).unwrap();
        assert_eq!((r.overall[0].dice_mean, r.overall[0].dice_std), (85.0, 5.0));
        assert_eq!(r.overall[0].assd_undefined, 2);
        let one = aggregate(vec![row("a", 70.0, 1)]).unwrap();
        assert_eq!((one.per_domain[0].dice_mean, one.per_domain[0].dice_std), (70.0, 0.0));
        let split = aggregate(vec![row("a", 80.0, 0), row("b", 90.0, 1), row("c", 60.0, 1)]).unwrap();
        assert_eq!(split.per_domain.iter().map(|g| g.cases).sum::<usize>(), 3);
        assert!(aggregate(vec![]).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let rows = vec![
            CaseMetric { case_id: "x".into(), domain_id: 2, class: 1, dice_percent: 91.25, assd: Some(1.5) },
            CaseMetric { case_id: "x".into(), domain_id: 2, class: 2, dice_percent: 0.0, assd: None },
        ];
        let r = aggregate(rows).unwrap();
        let p = dir.path().join("report.csv");
        r.write_csv(&p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("case_id,domain_id,class,dice_percent,assd\n"));
        assert_eq!(MetricsReport::read_csv(&p).unwrap(), r);
        assert!(r.to_table().contains("undefined"));
    }

    #[test]
    fn style_separation_by_hand() {
        // domain 0 codes point along x, domain 1 along y; one cross pair is diagonal
        let codes = vec![vec![1.0, 0.0], vec![2.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]];
        let s = style_separation(&codes, &[0, 0, 1, 1]).unwrap();
        let d = std::f64::consts::FRAC_1_SQRT_2;
        assert!((s.intra - (1.0 + d) / 2.0).abs() < 1e-12);
        assert!((s.inter - (0.0 + d + 0.0 + d) / 4.0).abs() < 1e-12);
        assert!((s.gap() - (s.intra - s.inter)).abs() < 1e-15);
        assert!(style_separation(&codes, &[0, 1, 2, 3]).is_err());
        assert!(style_separation(&[vec![0.0, 0.0], vec![1.0, 0.0]], &[0, 1]).is_err());
        assert!(style_separation(&codes, &[0, 0]).is_err());
    }

    #[test]
    fn wilcoxon_reference_values() {
        // all ten differences positive with distinct magnitudes: p = 2 / 2^10
        let a: Vec<f64> = (1..=10).map(|i| i as f64).collect();
        let b = vec![0.0; 10];
        let r = wilcoxon_signed_rank(&a, &b).unwrap();
        assert_eq!(r.w_plus, 55.0);
        assert!((r.p_value - 2.0 / 1024.0).abs() < 1e-15);
        let same = wilcoxon_signed_rank(&a, &a).unwrap();
        assert_eq!(same.p_value, 1.0);
        // symmetric signs: W+ = 1+4+5 = 10 of total 21 for n = 6
        let d = [1.0, -2.0, -3.0, 4.0, 5.0, -6.0];
        let r = wilcoxon_signed_rank(&d, &[0.0; 6]).unwrap();
        assert_eq!(r.w_plus, 10.0);
        assert!(r.p_value > 0.9);
    }
}
