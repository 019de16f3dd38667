//! Pooling of per-subframe gradients into one value per primitive.
//!
//! Stacks are indexed `[subframe][primitive]` and pooling is component-wise.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Aggregation {
    /// Keep the entry with the largest magnitude, sign included.
    Max,
    Mean,
    /// Mean of the `k` largest-magnitude entries.
    TopK(usize),
}

impl fmt::Display for Aggregation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Aggregation::Max => write!(f, "max"),
            Aggregation::Mean => write!(f, "mean"),
            Aggregation::TopK(k) => write!(f, "topk({k})"),
        }
    }
}

impl FromStr for Aggregation {
    type Err = Error;

    /// Accepts `max`, `mean`, `topk(k)` and `topk:k`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        match s.as_str() {
            "max" => return Ok(Aggregation::Max),
            "mean" | "average" => return Ok(Aggregation::Mean),
            _ => {}
        }
        let k = s
            .strip_prefix("topk")
            .map(|rest| rest.trim_start_matches([':', '(']).trim_end_matches(')'))
            .and_then(|k| k.parse::<usize>().ok())
            .ok_or_else(|| Error::Config(format!("unknown aggregation '{s}'")))?;
        if k == 0 {
            return Err(Error::ParameterOutOfRange("top-k needs k >= 1".into()));
        }
        Ok(Aggregation::TopK(k))
    }
}

fn check_stack<const D: usize>(stack: &[Vec<[f64; D]>]) -> Result<usize> {
    let first = stack.first().ok_or(Error::EmptyStack)?;
    if let Some(bad) = stack.iter().find(|s| s.len() != first.len()) {
        return Err(Error::ShapeMismatch(format!(
            "subframes hold {} and {} primitives",
            first.len(),
            bad.len()
        )));
    }
    Ok(first.len())
}

fn per_component<const D: usize, F>(stack: &[Vec<[f64; D]>], f: F) -> Result<Vec<[f64; D]>>
where
    F: Fn(&mut dyn Iterator<Item = f64>) -> f64 + Sync,
{
    let g = check_stack(stack)?;
    Ok((0..g)
        .into_par_iter()
        .map(|p| std::array::from_fn(|c| f(&mut stack.iter().map(|s| s[p][c]))))
        .collect())
}

pub fn aggregate_max<const D: usize>(stack: &[Vec<[f64; D]>]) -> Result<Vec<[f64; D]>> {
    per_component(stack, |vals| {
        let mut best = vals.next().unwrap_or(0.0);
        for v in vals {
            if v.abs() > best.abs() {
                best = v;
            }
        }
        best
    })
}

pub fn aggregate_mean<const D: usize>(stack: &[Vec<[f64; D]>]) -> Result<Vec<[f64; D]>> {
    let n = stack.len() as f64;
    per_component(stack, |vals| vals.sum::<f64>() / n)
}

pub fn aggregate_topk<const D: usize>(stack: &[Vec<[f64; D]>], k: usize) -> Result<Vec<[f64; D]>> {
    if k == 0 || k > stack.len() {
        return Err(Error::ParameterOutOfRange(format!(
            "top-k with k = {k} over {} subframes",
            stack.len()
        )));
    }
    per_component(stack, |vals| {
        let vals: Vec<f64> = vals.collect();
        let mut order: Vec<usize> = (0..vals.len()).collect();
        // Stable: equal magnitudes keep the lower subframe first.
        order.sort_by(|&a, &b| vals[b].abs().total_cmp(&vals[a].abs()));
        let mut chosen = order[..k].to_vec();
        chosen.sort_unstable();
        chosen.iter().map(|&i| vals[i]).sum::<f64>() / k as f64
    })
}

pub fn aggregate<const D: usize>(stack: &[Vec<[f64; D]>], mode: Aggregation) -> Result<Vec<[f64; D]>> {
    match mode {
        Aggregation::Max => aggregate_max(stack),
        Aggregation::Mean => aggregate_mean(stack),
        Aggregation::TopK(k) => aggregate_topk(stack, k),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn stack2(values: &[[f64; 2]]) -> Vec<Vec<[f64; 2]>> {
        values.iter().map(|v| vec![*v]).collect()
    }

    #[test]
    fn max_keeps_sign_of_largest_magnitude() {
        let out = aggregate_max(&stack2(&[[3.0, -1.0], [-5.0, 2.0]])).unwrap();
        assert_eq!(out, vec![[-5.0, 2.0]]);
    }

    #[test]
    fn single_subframe_is_identity() {
        let s = stack2(&[[0.7, -0.2]]);
        assert_eq!(aggregate_max(&s).unwrap(), vec![[0.7, -0.2]]);
        assert_eq!(aggregate_mean(&s).unwrap(), vec![[0.7, -0.2]]);
    }

    #[test]
    fn zero_stack_gives_zero() {
        let s = vec![vec![[0.0; 2]; 3]; 4];
        assert_eq!(aggregate_max(&s).unwrap(), vec![[0.0; 2]; 3]);
    }

    #[test]
    fn mean_example() {
        let out = aggregate_mean(&vec![vec![[3.0]], vec![[-5.0]]]).unwrap();
        assert_eq!(out, vec![[-1.0]]);
    }

    #[test]
    fn ties_go_to_the_lowest_subframe() {
        let out = aggregate_max(&vec![vec![[2.0]], vec![[-2.0]]]).unwrap();
        assert_eq!(out, vec![[2.0]]);
        let out = aggregate_topk(&vec![vec![[-2.0]], vec![[2.0]], vec![[1.0]]], 1).unwrap();
        assert_eq!(out, vec![[-2.0]]);
    }

    #[test]
    fn errors() {
        let empty: Vec<Vec<[f64; 2]>> = Vec::new();
        assert!(matches!(aggregate_max(&empty), Err(Error::EmptyStack)));
        let s = stack2(&[[1.0, 1.0], [2.0, 2.0]]);
        assert!(matches!(aggregate_topk(&s, 0), Err(Error::ParameterOutOfRange(_))));
        assert!(matches!(aggregate_topk(&s, 3), Err(Error::ParameterOutOfRange(_))));
        let ragged = vec![vec![[1.0, 1.0]], vec![]];
        assert!(matches!(aggregate_mean(&ragged), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn parse_modes() {
        assert_eq!("max".parse::<Aggregation>().unwrap(), Aggregation::Max);
        assert_eq!("mean".parse::<Aggregation>().unwrap(), Aggregation::Mean);
        assert_eq!("topk(5)".parse::<Aggregation>().unwrap(), Aggregation::TopK(5));
        assert_eq!("topk:3".parse::<Aggregation>().unwrap(), Aggregation::TopK(3));
        assert!("median".parse::<Aggregation>().is_err());
        assert!("topk(0)".parse::<Aggregation>().is_err());
        for m in [Aggregation::Max, Aggregation::Mean, Aggregation::TopK(4)] {
            assert_eq!(m.to_string().parse::<Aggregation>().unwrap(), m);
        }
    }

    fn arb_stack() -> impl Strategy<Value = Vec<Vec<[f64; 2]>>> {
        (1usize..8, 1usize..6).prop_flat_map(|(n, g)| {
            prop::collection::vec(prop::collection::vec(prop::array::uniform2(-10.0f64..10.0), g), n)
        })
    }

    proptest! {
        #[test]
        fn max_magnitude_is_exact_and_selected(stack in arb_stack()) {
            let out = aggregate_max(&stack).unwrap();
            for (p, v) in out.iter().enumerate() {
                for c in 0..2 {
                    let m = stack.iter().map(|s| s[p][c].abs()).fold(0.0, f64::max);
                    prop_assert_eq!(v[c].abs(), m);
                    prop_assert!(stack.iter().any(|s| s[p][c] == v[c]));
                }
            }
        }

        #[test]
        fn topk_extremes_reduce_bit_exactly(stack in arb_stack()) {
            let n = stack.len();
            prop_assert_eq!(aggregate_topk(&stack, 1).unwrap(), aggregate_max(&stack).unwrap());
            prop_assert_eq!(aggregate_topk(&stack, n).unwrap(), aggregate_mean(&stack).unwrap());
        }

        #[test]
        fn max_is_permutation_invariant_without_ties(stack in arb_stack(), seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let mut shuffled = stack.clone();
            shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let a = aggregate_max(&stack).unwrap();
            let b = aggregate_max(&shuffled).unwrap();
            for (p, (x, y)) in a.iter().zip(&b).enumerate() {
                for c in 0..2 {
                    let best = x[c].abs();
                    let tied = stack.iter().filter(|s| s[p][c].abs() == best).count();
                    if tied == 1 {
                        prop_assert_eq!(x[c], y[c]);
                    } else {
                        prop_assert_eq!(x[c].abs(), y[c].abs());
                    }
                }
            }
        }
    }
}
