use std::collections::BTreeSet;

use super::{Dataset, Isotope};
use crate::error::{Error, Result};

pub const DEFAULT_SELECT_K: usize = 8;

/// Average ranks (1-based), ties share the mean of their positions.
fn ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut out = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            out[k] = avg;
        }
        i = j + 1;
    }
    out
}

fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx <= 0.0 || syy <= 0.0 {
        0.0
    } else {
        sxy / (sxx * syy).sqrt()
    }
}

/// Spearman rank correlation; zero when either input is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    assert_eq!(x.len(), y.len());
    if x.len() < 2 {
        return 0.0;
    }
    pearson(&ranks(x), &ranks(y))
}

/// Union over isotope tasks of the `k` features with the largest absolute
/// Spearman correlation to that task's target. Ties in |rho| are broken by
/// feature name. Returned indices are ascending.
pub fn select_features(dataset: &Dataset, k: usize) -> Result<Vec<usize>> {
    if k == 0 {
        return Err(Error::domain("feature selection needs k >= 1"));
    }
    let dim = dataset.schema().dim();
    if k >= dim {
        return Ok((0..dim).collect());
    }
    let names = dataset.schema().names();
    let mut selected = BTreeSet::new();
    for iso in Isotope::ALL {
        let rows: Vec<_> = dataset
            .samples()
            .iter()
            .filter_map(|s| s.isotopes.get(iso).map(|y| (s, y)))
            .collect();
        if rows.len() < 3 {
            continue;
        }
        let target: Vec<f64> = rows.iter().map(|(_, y)| *y).collect();
        let mut scored: Vec<(i64, usize)> = (0..dim)
            .map(|d| {
                let column: Vec<f64> = rows.iter().map(|(s, _)| s.features[d]).collect();
                // Quantised so that summation-order noise cannot reorder ties.
                let score = (spearman(&column, &target).abs() * 1e12).round() as i64;
                (score, d)
            })
            .collect();
        scored.sort_by(|a, b| b.0.cmp(&a.0).then_with(|| names[a.1].cmp(&names[b.1])));
        selected.extend(scored.iter().take(k).map(|&(_, d)| d));
    }
    if selected.is_empty() {
        return Err(Error::domain("no isotope task has enough observations for feature selection"));
    }
    Ok(selected.into_iter().collect())
}
