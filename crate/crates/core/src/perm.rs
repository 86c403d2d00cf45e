//! Exhaustive permutation search shared by every permutation-invariant
//! objective and metric.

use crate::error::{invalid, Result};

/// Largest speaker count handled by exhaustive search (4! = 24 candidates).
pub const MAX_SPEAKERS: usize = 4;

/// All permutations of `0..n` in lexicographic order.
pub fn permutations(n: usize) -> Vec<Vec<usize>> {
    fn rec(prefix: &mut Vec<usize>, used: &mut [bool], out: &mut Vec<Vec<usize>>) {
        if prefix.len() == used.len() {
            out.push(prefix.clone());
            return;
        }
        for i in 0..used.len() {
            if !used[i] {
                used[i] = true;
                prefix.push(i);
                rec(prefix, used, out);
                prefix.pop();
                used[i] = false;
            }
        }
    }
    let mut out = Vec::new();
    rec(&mut Vec::with_capacity(n), &mut vec![false; n], &mut out);
    out
}

pub fn check_speakers(c: usize) -> Result<()> {
    if c == 0 || c > MAX_SPEAKERS {
        return Err(invalid(format!(
            "speaker count {c} outside 1..={MAX_SPEAKERS} supported by exhaustive permutation search"
        )));
    }
    Ok(())
}

/// Permutation `π` minimizing `Σ_c cost[c][π(c)]`; ties go to the
/// lexicographically smallest permutation. Non-finite totals never win.
/// Returns `None` when no permutation has a finite cost.
pub fn best_assignment(cost: &[Vec<f64>]) -> Option<(Vec<usize>, f64)> {
    let mut best: Option<(Vec<usize>, f64)> = None;
    for p in permutations(cost.len()) {
        let total: f64 = p.iter().enumerate().map(|(c, &r)| cost[c][r]).sum();
        if !total.is_finite() {
            continue;
        }
        if best.as_ref().map_or(true, |(_, b)| total < *b) {
            best = Some((p, total));
        }
    }
    best
}

pub fn is_identity(p: &[usize]) -> bool {
    p.iter().enumerate().all(|(i, &v)| i == v)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lexicographic_order() {
        assert_eq!(
            permutations(3),
            vec![
                vec![0, 1, 2],
                vec![0, 2, 1],
                vec![1, 0, 2],
                vec![1, 2, 0],
                vec![2, 0, 1],
                vec![2, 1, 0]
            ]
        );
        assert_eq!(permutations(4).len(), 24);
        assert_eq!(permutations(1), vec![vec![0]]);
    }

    #[test]
    fn ties_pick_first() {
        let cost = vec![vec![1.0, 1.0], vec![1.0, 1.0]];
        assert_eq!(best_assignment(&cost).unwrap().0, vec![0, 1]);
    }

    #[test]
    fn infinite_pairs_are_avoided() {
        let cost = vec![vec![f64::INFINITY, 2.0], vec![1.0, 0.0]];
        assert_eq!(best_assignment(&cost).unwrap(), (vec![1, 0], 3.0));
        let all_bad = vec![vec![f64::INFINITY, f64::INFINITY], vec![0.0, 0.0]];
        assert!(best_assignment(&all_bad).is_none());
    }
}
