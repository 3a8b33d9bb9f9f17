//! Krum and multi-Krum selection.

use crate::engine::{check_layouts, ClientUpdate};
use crate::{Error, Execution, Result};

pub(crate) fn check_neighbourhood(n: usize, f: usize) -> Result<()> {
    if n < f + 3 {
        return Err(Error::Config(format!(
            "krum requires n - f - 2 >= 1 (n = {n}, byzantine_f = {f})"
        )));
    }
    Ok(())
}

pub(crate) fn check_mkrum(n: usize, f: usize, m: usize) -> Result<()> {
    if n <= m + 2 * f + 2 {
        return Err(Error::Config(format!(
            "mkrum requires n - m > 2f + 2 (n = {n}, krum_m = {m}, byzantine_f = {f})"
        )));
    }
    Ok(())
}

/// Sum of squared distances from each update to its `n - f - 2` nearest peers.
pub fn krum_scores(updates: &[ClientUpdate], byzantine_f: usize) -> Result<Vec<f64>> {
    let n = updates.len();
    check_neighbourhood(n, byzantine_f)?;
    check_layouts(updates)?;
    let k = n - byzantine_f - 2;

    // upper-triangular pairwise distances, computed independently per pair
    let pairs: Vec<(usize, usize)> = (0..n)
        .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
        .collect();
    let dists = Execution::Parallel.map(&pairs, |&(i, j)| {
        updates[i]
            .params
            .dist_sq(&updates[j].params)
            .expect("layouts checked")
    });
    let mut matrix = vec![0.0; n * n];
    for (&(i, j), d) in pairs.iter().zip(dists) {
        matrix[i * n + j] = d;
        matrix[j * n + i] = d;
    }

    Ok((0..n)
        .map(|i| {
            let mut row: Vec<f64> = (0..n)
                .filter(|&j| j != i)
                .map(|j| matrix[i * n + j])
                .collect();
            row.select_nth_unstable_by(k - 1, f64::total_cmp);
            let mut nearest = row[..k].to_vec();
            nearest.sort_unstable_by(f64::total_cmp);
            nearest.iter().sum()
        })
        .collect())
}

/// Keeps the `select` lowest-score updates (ties to the lowest client id),
/// returned in their original order. `select = 1` is plain Krum.
pub fn krum_select(
    updates: Vec<ClientUpdate>,
    byzantine_f: usize,
    select: usize,
) -> Result<Vec<ClientUpdate>> {
    if select == 0 || select > updates.len() {
        return Err(Error::Config(format!(
            "krum selection size must be in 1..={}, got {select}",
            updates.len()
        )));
    }
    let scores = krum_scores(&updates, byzantine_f)?;
    let mut order: Vec<usize> = (0..updates.len()).collect();
    order.sort_by(|&a, &b| {
        scores[a]
            .total_cmp(&scores[b])
            .then(updates[a].client_id.cmp(&updates[b].client_id))
    });
    let mut keep = vec![false; updates.len()];
    for &i in &order[..select] {
        keep[i] = true;
    }
    Ok(updates
        .into_iter()
        .zip(keep)
        .filter_map(|(u, k)| k.then_some(u))
        .collect())
}
