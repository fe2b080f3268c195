//! Shapley values of cooperative games over bitmask coalitions.
//!
//! Player `i` is bit `i` of a [`Coalition`]. The value oracle is wrapped in a
//! memo table, so each distinct coalition is evaluated at most once per game.

use std::cell::{Cell, RefCell};
use std::collections::{BTreeMap, HashMap};
use std::fmt::Display;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{MceError, Result};

pub type Coalition = u64;

/// Largest supported player count (one bit per player).
pub const MAX_PLAYERS: usize = 63;

/// Indices of the players in `mask`, ascending.
pub fn members(mask: Coalition) -> impl Iterator<Item = usize> {
    (0..64).filter(move |i| mask >> i & 1 == 1)
}

pub fn size(mask: Coalition) -> usize {
    mask.count_ones() as usize
}

/// All non-empty sub-masks of `mask`, sorted ascending by bitmask value.
pub fn enumerate_subsets(mask: Coalition) -> Vec<Coalition> {
    let mut out = Vec::with_capacity((1usize << size(mask).min(20)) - 1);
    let mut s = mask;
    while s != 0 {
        out.push(s);
        s = (s - 1) & mask;
    }
    out.reverse();
    out
}

/// A player count plus a characteristic function `v(S)`.
pub struct CoalitionGame<F> {
    players: usize,
    oracle: F,
    empty_value: Option<f64>,
    cache: RefCell<HashMap<Coalition, f64>>,
    calls: Cell<usize>,
}

impl<F, E> CoalitionGame<F>
where
    F: Fn(Coalition) -> std::result::Result<f64, E>,
    E: Display,
{
    pub fn new(players: usize, oracle: F) -> Result<Self> {
        if players == 0 || players > MAX_PLAYERS {
            return Err(MceError::config(
                "players",
                format!("player count must be in 1..={MAX_PLAYERS}, got {players}"),
            ));
        }
        Ok(CoalitionGame {
            players,
            oracle,
            empty_value: None,
            cache: RefCell::new(HashMap::new()),
            calls: Cell::new(0),
        })
    }

    /// Fixes `v(∅)` without consulting the oracle.
    pub fn with_empty_value(mut self, value: f64) -> Self {
        self.empty_value = Some(value);
        self
    }

    pub fn players(&self) -> usize {
        self.players
    }

    pub fn full_mask(&self) -> Coalition {
        if self.players == 64 {
            u64::MAX
        } else {
            (1u64 << self.players) - 1
        }
    }

    /// Distinct oracle evaluations so far.
    pub fn oracle_calls(&self) -> usize {
        self.calls.get()
    }

    pub fn value(&self, subset: Coalition) -> Result<f64> {
        if subset == 0 {
            if let Some(v) = self.empty_value {
                return Ok(v);
            }
        }
        if let Some(&v) = self.cache.borrow().get(&subset) {
            return Ok(v);
        }
        let v = (self.oracle)(subset).map_err(|e| MceError::Oracle {
            subset,
            message: e.to_string(),
        })?;
        self.calls.set(self.calls.get() + 1);
        self.cache.borrow_mut().insert(subset, v);
        Ok(v)
    }

    fn check_restrict(&self, restrict: Coalition) -> Result<()> {
        if restrict & !self.full_mask() != 0 {
            return Err(MceError::Contract(format!(
                "restriction {restrict:#b} exceeds the {}-player set",
                self.players
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum ShapleyMethod {
    Exact,
    MonteCarlo { permutations: usize, seed: u64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct ShapleyResult {
    /// One entry per player; players outside the restriction get 0.
    pub phi: Vec<f64>,
    /// Oracle evaluations made while computing this result.
    pub oracle_calls: usize,
    pub method: ShapleyMethod,
    /// Distinct orderings visited (Monte-Carlo only).
    pub distinct_permutations: Option<usize>,
}

/// `1 / (k · C(k−1, s))`, the weight of a size-`s` coalition in a `k`-player game.
fn coalition_weights(k: usize) -> Vec<f64> {
    let mut w = Vec::with_capacity(k);
    let mut binom = 1.0f64; // C(k-1, s)
    for s in 0..k {
        w.push(1.0 / (k as f64 * binom));
        binom = binom * (k - 1 - s) as f64 / (s + 1) as f64;
    }
    w
}

/// Shapley values of the players in `restrict`, playing the sub-game on
/// `restrict` only, by the weighted sum over coalitions.
pub fn exact_shapley<F, E>(game: &CoalitionGame<F>, restrict: Coalition) -> Result<ShapleyResult>
where
    F: Fn(Coalition) -> std::result::Result<f64, E>,
    E: Display,
{
    game.check_restrict(restrict)?;
    let before = game.oracle_calls();
    let mut phi = vec![0.0; game.players()];
    let k = size(restrict);
    if k > 0 {
        let weights = coalition_weights(k);
        for i in members(restrict) {
            let bit = 1u64 << i;
            let rest = restrict & !bit;
            let mut total = 0.0;
            // every sub-mask of `rest`, including the empty one
            let mut s = rest;
            loop {
                let marginal = game.value(s | bit)? - game.value(s)?;
                total += weights[size(s)] * marginal;
                if s == 0 {
                    break;
                }
                s = (s - 1) & rest;
            }
            phi[i] = total;
        }
    }
    Ok(ShapleyResult {
        phi,
        oracle_calls: game.oracle_calls() - before,
        method: ShapleyMethod::Exact,
        distinct_permutations: None,
    })
}

/// Permutation-sampling estimate with `permutations` uniformly shuffled
/// joining orders.
///
/// Repeated orderings are tallied and evaluated once, weighted by their
/// count; coalition values are memoised by the game.
pub fn mc_shapley<F, E>(
    game: &CoalitionGame<F>,
    restrict: Coalition,
    permutations: usize,
    seed: u64,
) -> Result<ShapleyResult>
where
    F: Fn(Coalition) -> std::result::Result<f64, E>,
    E: Display,
{
    if permutations == 0 {
        return Err(MceError::config("mc_k", "permutation count must be at least 1"));
    }
    game.check_restrict(restrict)?;
    let before = game.oracle_calls();
    let players: Vec<usize> = members(restrict).collect();
    let mut tally: BTreeMap<Vec<usize>, usize> = BTreeMap::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..permutations {
        let mut order = players.clone();
        order.shuffle(&mut rng);
        *tally.entry(order).or_insert(0) += 1;
    }

    let mut phi = vec![0.0; game.players()];
    if !players.is_empty() {
        for (order, &count) in &tally {
            let mut mask = 0u64;
            let mut prev = game.value(0)?;
            for &p in order {
                mask |= 1 << p;
                let cur = game.value(mask)?;
                phi[p] += count as f64 * (cur - prev);
                prev = cur;
            }
        }
        for v in &mut phi {
            *v /= permutations as f64;
        }
    }
    Ok(ShapleyResult {
        phi,
        oracle_calls: game.oracle_calls() - before,
        method: ShapleyMethod::MonteCarlo {
            permutations,
            seed,
        },
        distinct_permutations: Some(tally.len()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;
    use std::convert::Infallible;

    fn table_game(values: Vec<f64>) -> CoalitionGame<impl Fn(u64) -> std::result::Result<f64, Infallible>> {
        let players = values.len().trailing_zeros() as usize;
        CoalitionGame::new(players, move |s| Ok(values[s as usize])).unwrap()
    }

    fn random_table(players: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        (0..1usize << players).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    /// Average marginal contribution over every ordering of the players.
    fn permutation_average(values: &[f64], players: usize) -> Vec<f64> {
        fn walk(order: &mut Vec<usize>, left: &mut Vec<usize>, values: &[f64], acc: &mut [f64], n: &mut usize) {
            if left.is_empty() {
                let mut mask = 0usize;
                for &p in order.iter() {
                    let before = values[mask];
                    mask |= 1 << p;
                    acc[p] += values[mask] - before;
                }
                *n += 1;
                return;
            }
            for i in 0..left.len() {
                let p = left.remove(i);
                order.push(p);
                walk(order, left, values, acc, n);
                order.pop();
                left.insert(i, p);
            }
        }
        let mut acc = vec![0.0; players];
        let mut n = 0;
        walk(&mut Vec::new(), &mut (0..players).collect(), values, &mut acc, &mut n);
        acc.iter().map(|v| v / n as f64).collect()
    }

    #[test]
    fn enumerate_three_players() {
        assert_eq!(enumerate_subsets(0b111), vec![1, 2, 3, 4, 5, 6, 7]);
    }

    #[test]
    fn enumerate_with_second_player_missing() {
        assert_eq!(enumerate_subsets(0b101), vec![0b001, 0b100, 0b101]);
    }

    #[test]
    fn enumerate_empty_mask() {
        assert!(enumerate_subsets(0).is_empty());
    }

    #[test]
    fn additive_game() {
        let w = [0.2, 0.3, 0.5];
        let game = CoalitionGame::new(3, |s: u64| {
            Ok::<_, Infallible>(members(s).map(|i| w[i]).sum())
        })
        .unwrap();
        let r = exact_shapley(&game, 0b111).unwrap();
        for i in 0..3 {
            assert!((r.phi[i] - w[i]).abs() < 1e-12);
        }
        assert_eq!(r.method, ShapleyMethod::Exact);
    }

    #[test]
    fn symmetric_two_player_game() {
        let game = table_game(vec![0.0, 0.5, 0.5, 1.0]);
        let r = exact_shapley(&game, 0b11).unwrap();
        assert_eq!(r.phi, vec![0.5, 0.5]);
    }

    #[test]
    fn three_players_match_permutation_average() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let values = random_table(3, &mut rng);
        let expect = permutation_average(&values, 3);
        let r = exact_shapley(&table_game(values), 0b111).unwrap();
        for i in 0..3 {
            assert!((r.phi[i] - expect[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn restriction_zeroes_outside_players() {
        let w = [1.0, 2.0, 4.0];
        let game = CoalitionGame::new(3, |s: u64| {
            if s & 0b010 != 0 {
                return Err("player 1 is unavailable");
            }
            Ok(members(s).map(|i| w[i]).sum())
        })
        .unwrap();
        let r = exact_shapley(&game, 0b101).unwrap();
        assert_eq!(r.phi, vec![1.0, 0.0, 4.0]);
        let err = exact_shapley(&game, 0b111).unwrap_err();
        assert!(matches!(err, MceError::Oracle { .. }));
        assert!(exact_shapley(&game, 0b1000).is_err());
    }

    #[test]
    fn oracle_failure_carries_subset() {
        let game = CoalitionGame::new(2, |s: u64| if s == 0b11 { Err("boom") } else { Ok(0.0) }).unwrap();
        match exact_shapley(&game, 0b11) {
            Err(MceError::Oracle { subset, message }) => {
                assert_eq!(subset, 0b11);
                assert_eq!(message, "boom");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn mc_two_players_matches_recorded_frequencies() {
        let values = vec![0.0, 0.3, 0.9, 1.0];
        let game = table_game(values.clone());
        let r = mc_shapley(&game, 0b11, 5000, 17).unwrap();
        assert_eq!(r.distinct_permutations, Some(2));
        // reproduce the tally to recover the empirical ordering frequencies
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut first_zero = 0usize;
        for _ in 0..5000 {
            let mut order = vec![0usize, 1];
            order.shuffle(&mut rng);
            if order[0] == 0 {
                first_zero += 1;
            }
        }
        let f = first_zero as f64 / 5000.0;
        // order (0,1): player 0 adds v{0}, player 1 adds v{01}-v{0}; and symmetric
        let phi0 = f * values[1] + (1.0 - f) * (values[3] - values[2]);
        let phi1 = f * (values[3] - values[1]) + (1.0 - f) * values[2];
        assert!((r.phi[0] - phi0).abs() < 1e-12);
        assert!((r.phi[1] - phi1).abs() < 1e-12);
        // both orderings sampled near-equally, so the estimate is close to exact
        let exact = exact_shapley(&game, 0b11).unwrap();
        assert!((r.phi[0] - exact.phi[0]).abs() < 0.05);
    }

    #[test]
    fn mc_is_deterministic_per_seed() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let values = random_table(4, &mut rng);
        let a = mc_shapley(&table_game(values.clone()), 0b1111, 50, 99).unwrap();
        let b = mc_shapley(&table_game(values.clone()), 0b1111, 50, 99).unwrap();
        assert_eq!(a, b);
        let c = mc_shapley(&table_game(values), 0b1111, 50, 100).unwrap();
        assert_ne!(a.phi, c.phi);
    }

    #[test]
    fn mc_rejects_zero_permutations() {
        let game = table_game(vec![0.0, 1.0]);
        assert!(mc_shapley(&game, 1, 0, 0).is_err());
    }

    #[test]
    fn mc_converges_on_four_players() {
        let mut rng = ChaCha8Rng::seed_from_u64(123);
        let values = random_table(4, &mut rng);
        let exact = exact_shapley(&table_game(values.clone()), 0b1111).unwrap();
        let mut mean_err = 0.0;
        for seed in 0..10 {
            let game = table_game(values.clone()).with_empty_value(values[0]);
            let r = mc_shapley(&game, 0b1111, 2000, seed).unwrap();
            assert!(r.oracle_calls <= 15);
            let err = (0..4).map(|i| (r.phi[i] - exact.phi[i]).abs()).fold(0.0, f64::max);
            mean_err += err / 10.0;
        }
        assert!(mean_err < 0.05, "{mean_err}");
    }

    fn arb_game() -> impl Strategy<Value = (usize, Vec<f64>)> {
        (2usize..=5).prop_flat_map(|m| (Just(m), prop::collection::vec(-5.0f64..5.0, 1 << m)))
    }

    proptest! {
        #[test]
        fn efficiency_and_brute_force((m, values) in arb_game()) {
            let full = (1u64 << m) - 1;
            let r = exact_shapley(&table_game(values.clone()), full).unwrap();
            let total: f64 = r.phi.iter().sum();
            prop_assert!((total - (values[full as usize] - values[0])).abs() < 1e-10);
            let brute = permutation_average(&values, m);
            for i in 0..m {
                prop_assert!((r.phi[i] - brute[i]).abs() < 1e-10);
            }
        }

        #[test]
        fn additivity((m, a) in arb_game(), seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let b = random_table(m, &mut rng);
            let sum: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + y).collect();
            let full = (1u64 << m) - 1;
            let pa = exact_shapley(&table_game(a), full).unwrap().phi;
            let pb = exact_shapley(&table_game(b), full).unwrap().phi;
            let ps = exact_shapley(&table_game(sum), full).unwrap().phi;
            for i in 0..m {
                prop_assert!((ps[i] - pa[i] - pb[i]).abs() < 1e-10);
            }
        }

        #[test]
        fn dummy_player_gets_zero((m, mut values) in arb_game(), who in 0usize..5) {
            let dummy = who % m;
            let bit = 1usize << dummy;
            for s in 0..values.len() {
                if s & bit != 0 {
                    values[s] = values[s & !bit];
                }
            }
            let r = exact_shapley(&table_game(values), (1u64 << m) - 1).unwrap();
            prop_assert!(r.phi[dummy].abs() < 1e-10);
        }

        #[test]
        fn symmetric_players_share_equally((m, mut values) in arb_game()) {
            // make players 0 and 1 interchangeable
            for s in 0..values.len() {
                let swapped = (s & !0b11) | ((s & 1) << 1) | ((s >> 1) & 1);
                if swapped < s {
                    values[s] = values[swapped];
                }
            }
            let r = exact_shapley(&table_game(values), (1u64 << m) - 1).unwrap();
            prop_assert!((r.phi[0] - r.phi[1]).abs() < 1e-10);
        }

        #[test]
        fn mc_memo_bound((m, values) in arb_game(), k in 1usize..300, seed in any::<u64>()) {
            let full = (1u64 << m) - 1;
            let r = mc_shapley(&table_game(values), full, k, seed).unwrap();
            prop_assert!(r.oracle_calls <= 1 << m);
        }
    }
}
