//! Signal-counting model of the urn game.
//!
//! Every draw and every observed guess is treated as an independent signal
//! that matches the true urn with probability 2/3. The own draw can be
//! down-weighted with `self_weight`.

use crate::types::Urn;

/// Probability that a single signal matches the true urn.
pub const SIGNAL_ACCURACY: f64 = 2.0 / 3.0;

fn sign(u: Urn) -> f64 {
    match u {
        Urn::A => 1.0,
        Urn::B => -1.0,
    }
}

/// Net evidence for A in units of one signal.
fn evidence(own: Urn, observed: &[Urn], self_weight: f64) -> f64 {
    self_weight * sign(own) + observed.iter().map(|&u| sign(u)).sum::<f64>()
}

/// Posterior probability of urn A under a uniform prior.
pub fn posterior_a(own: Urn, observed: &[Urn], self_weight: f64) -> f64 {
    // each signal shifts the log-odds by ln(2/3 / 1/3) = ln 2
    let log_odds = std::f64::consts::LN_2 * evidence(own, observed, self_weight);
    1.0 / (1.0 + (-log_odds).exp())
}

/// MAP guess; an exact tie follows the own draw.
pub fn urn_guess(own: Urn, observed: &[Urn], self_weight: f64) -> Urn {
    let e = evidence(own, observed, self_weight);
    if e.abs() < 1e-12 {
        own
    } else if e > 0.0 {
        Urn::A
    } else {
        Urn::B
    }
}

fn binomial(n: u32, k: u32) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * f64::from(n - i) / f64::from(i + 1))
}

/// Expected accuracy of [`urn_guess`] with the own draw plus `extra` observed signals.
pub fn expected_accuracy(extra: u32, self_weight: f64) -> f64 {
    let p = SIGNAL_ACCURACY;
    let mut acc = 0.0;
    // by symmetry take the true urn to be A
    for (own, p_own) in [(Urn::A, p), (Urn::B, 1.0 - p)] {
        for k in 0..=extra {
            let pk = binomial(extra, k) * p.powi(k as i32) * (1.0 - p).powi((extra - k) as i32);
            let observed: Vec<Urn> = (0..extra).map(|i| if i < k { Urn::A } else { Urn::B }).collect();
            if urn_guess(own, &observed, self_weight) == Urn::A {
                acc += p_own * pk;
            }
        }
    }
    acc
}

/// Expected gain in points from linking to `target`, given the targets
/// already linked this round.
///
/// A link to position `t` is valued as revealing the guesses of positions
/// `1..=t` (the target's guess and what it could see). Links to targets
/// already covered by an earlier, higher link add nothing.
pub fn link_gain(target: u32, linked: &[u32], self_weight: f64) -> f64 {
    let covered = linked.iter().copied().max().unwrap_or(0);
    if target <= covered {
        return 0.0;
    }
    100.0 * (expected_accuracy(target, self_weight) - expected_accuracy(covered, self_weight))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn no_observations() {
        assert!((posterior_a(Urn::A, &[], 1.0) - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(urn_guess(Urn::A, &[], 1.0), Urn::A);
    }

    #[test]
    fn two_contrary_guesses() {
        assert!((posterior_a(Urn::A, &[Urn::B, Urn::B], 1.0) - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(urn_guess(Urn::A, &[Urn::B, Urn::B], 1.0), Urn::B);
        // tie follows own draw
        assert_eq!(urn_guess(Urn::B, &[Urn::A], 1.0), Urn::B);
        // a down-weighted own draw loses the tie
        assert_eq!(urn_guess(Urn::B, &[Urn::A], 0.5), Urn::A);
    }

    #[test]
    fn accuracy_values() {
        assert!((expected_accuracy(0, 1.0) - 2.0 / 3.0).abs() < 1e-15);
        assert!((expected_accuracy(1, 1.0) - 2.0 / 3.0).abs() < 1e-15);
        assert!((expected_accuracy(2, 1.0) - 20.0 / 27.0).abs() < 1e-15);
        assert!((expected_accuracy(3, 1.0) - 20.0 / 27.0).abs() < 1e-15);
        for t in 0..6 {
            assert!(expected_accuracy(t + 1, 1.0) >= expected_accuracy(t, 1.0) - 1e-15);
        }
    }

    #[test]
    fn link_values() {
        assert_eq!(link_gain(1, &[], 1.0), 0.0);
        let g = link_gain(2, &[], 1.0);
        assert!((g - 100.0 * 2.0 / 27.0).abs() < 1e-12);
        assert_eq!(link_gain(1, &[2], 1.0), 0.0);
        assert!(link_gain(3, &[], 1.0) < 8.0);
    }
}
