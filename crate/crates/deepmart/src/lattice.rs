//! Exact finite-state oracle: Snell envelopes, Doob decompositions, dual
//! values for arbitrary martingales, a recombining binomial Bermudan pricer
//! and a nested Monte Carlo estimator of the dual integrand.
//!
//! Lattices here are deliberately tiny (a handful of dates, a few dozen
//! states) so every expectation is an exact sum over paths and the duality
//! identities can be checked to floating-point accuracy, free of sampling
//! noise.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::market::{ModelSpec, TimeGrid};
use crate::seeds::derive_seed;
use crate::stats;

/// Finite-state discrete-time Markov chain with a payoff table.
///
/// Dates run `0..=n_dates`. `transition[n][s]` is the distribution of the
/// date-`n+1` state given state `s` at date `n`; `payoff[n][s]` is the
/// (already discounted) exercise value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatticeModel {
    pub n_dates: usize,
    pub states_per_date: Vec<usize>,
    pub transition: Vec<Vec<Vec<f64>>>,
    pub payoff: Vec<Vec<f64>>,
}

impl LatticeModel {
    pub fn validate(&self) -> Result<()> {
        let n = self.n_dates;
        if n == 0 {
            return Err(Error::invalid("lattice needs at least one interval"));
        }
        if self.states_per_date.len() != n + 1 || self.payoff.len() != n + 1 {
            return Err(Error::invalid("need states and payoffs for dates 0..=N"));
        }
        if self.transition.len() != n {
            return Err(Error::invalid("need a transition table per interval"));
        }
        for date in 0..=n {
            if self.payoff[date].len() != self.states_per_date[date] {
                return Err(Error::invalid(format!("payoff table shape at date {date}")));
            }
        }
        for date in 0..n {
            let rows = &self.transition[date];
            if rows.len() != self.states_per_date[date] {
                return Err(Error::invalid(format!("transition shape at date {date}")));
            }
            for (s, row) in rows.iter().enumerate() {
                if row.len() != self.states_per_date[date + 1] {
                    return Err(Error::invalid(format!(
                        "transition row {s} at date {date} has wrong length"
                    )));
                }
                if row.iter().any(|p| *p < 0.0) {
                    return Err(Error::invalid("negative transition probability"));
                }
                let total: f64 = row.iter().sum();
                if (total - 1.0).abs() > 1e-12 {
                    return Err(Error::invalid(format!(
                        "transition row {s} at date {date} sums to {total}"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let lat: LatticeModel =
            serde_json::from_str(text).map_err(|e| Error::Format(e.to_string()))?;
        lat.validate()?;
        Ok(lat)
    }

    /// Small random lattice for randomized theory tests: 2..=5 intervals,
    /// 2..=4 states per date, random strictly positive transition rows and
    /// payoffs in `[0, 10)`.
    pub fn random(seed: u64) -> Self {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let n_dates = rng.gen_range(2..=5);
        let states_per_date: Vec<usize> = (0..=n_dates).map(|_| rng.gen_range(2..=4)).collect();
        let transition = (0..n_dates)
            .map(|n| {
                (0..states_per_date[n])
                    .map(|_| {
                        let mut row: Vec<f64> = (0..states_per_date[n + 1])
                            .map(|_| rng.gen_range(0.05..1.0))
                            .collect();
                        let total: f64 = row.iter().sum();
                        row.iter_mut().for_each(|p| *p /= total);
                        // Re-normalize exactly so validation is airtight.
                        let total: f64 = row.iter().sum();
                        let last = row.len() - 1;
                        row[last] += 1.0 - total;
                        row
                    })
                    .collect()
            })
            .collect();
        let payoff = (0..=n_dates)
            .map(|n| (0..states_per_date[n]).map(|_| rng.gen_range(0.0..10.0)).collect())
            .collect();
        let lat = LatticeModel {
            n_dates,
            states_per_date,
            transition,
            payoff,
        };
        lat.validate().expect("random lattice is valid");
        lat
    }

    /// Visit every positive-probability path `(s_0, .., s_N)` with its
    /// probability mass, starting from each possible initial state with
    /// its uniform weight if there are several.
    pub fn for_each_path<F: FnMut(&[usize], f64)>(&self, mut visit: F) {
        let initial = self.states_per_date[0];
        let w0 = 1.0 / initial as f64;
        let mut path = vec![0usize; self.n_dates + 1];
        for s0 in 0..initial {
            path[0] = s0;
            self.walk(1, w0, &mut path, &mut visit);
        }
    }

    fn walk<F: FnMut(&[usize], f64)>(
        &self,
        date: usize,
        prob: f64,
        path: &mut Vec<usize>,
        visit: &mut F,
    ) {
        if date > self.n_dates {
            visit(path, prob);
            return;
        }
        let here = path[date - 1];
        for (s, &p) in self.transition[date - 1][here].iter().enumerate() {
            if p == 0.0 {
                continue;
            }
            path[date] = s;
            self.walk(date + 1, prob * p, path, visit);
        }
    }
}

/// An adapted martingale on a lattice, stored through its one-step
/// increments `xi[n][s][s']` (value added when moving `s -> s'` over
/// interval `n`). Zero conditional mean row by row makes it a martingale.
#[derive(Debug, Clone, PartialEq)]
pub struct MartingaleTable {
    pub increments: Vec<Vec<Vec<f64>>>,
}

impl MartingaleTable {
    /// Largest absolute one-step conditional mean over all nodes.
    pub fn max_conditional_mean(&self, lat: &LatticeModel) -> f64 {
        let mut worst = 0.0f64;
        for n in 0..lat.n_dates {
            for s in 0..lat.states_per_date[n] {
                let mean: f64 = lat.transition[n][s]
                    .iter()
                    .zip(&self.increments[n][s])
                    .map(|(p, x)| p * x)
                    .sum();
                worst = worst.max(mean.abs());
            }
        }
        worst
    }

    /// Random adapted table centered row-wise so every one-step
    /// conditional mean vanishes exactly.
    pub fn random_centered(lat: &LatticeModel, seed: u64) -> Self {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let increments = (0..lat.n_dates)
            .map(|n| {
                (0..lat.states_per_date[n])
                    .map(|s| {
                        let raw: Vec<f64> = (0..lat.states_per_date[n + 1])
                            .map(|_| rng.gen_range(-5.0..5.0))
                            .collect();
                        let mean: f64 = lat.transition[n][s]
                            .iter()
                            .zip(&raw)
                            .map(|(p, x)| p * x)
                            .sum();
                        raw.iter().map(|x| x - mean).collect()
                    })
                    .collect()
            })
            .collect();
        MartingaleTable { increments }
    }
}

/// Exact Snell envelope with its Doob decomposition.
#[derive(Debug, Clone)]
pub struct SnellSolution {
    /// `y[n][s]`: exact stopping value at each node.
    pub y: Vec<Vec<f64>>,
    /// `continuation[n][s] = E[Y_{n+1} | s]` for dates `0..N`.
    pub continuation: Vec<Vec<f64>>,
    /// Doob martingale increments `y[n+1][s'] - continuation[n][s]`.
    pub doob: MartingaleTable,
    /// Predictable compensator increments `y[n][s] - continuation[n][s]` (>= 0).
    pub compensator_step: Vec<Vec<f64>>,
}

/// Backward induction `Y_n = max(g_n, E[Y_{n+1} | .])` plus the Doob parts.
pub fn snell_envelope_exact(lat: &LatticeModel) -> Result<SnellSolution> {
    lat.validate()?;
    let n = lat.n_dates;
    let mut y = vec![Vec::new(); n + 1];
    y[n] = lat.payoff[n].clone();
    let mut continuation = vec![Vec::new(); n];
    for date in (0..n).rev() {
        let next = &y[date + 1];
        let cont: Vec<f64> = lat.transition[date]
            .iter()
            .map(|row| row.iter().zip(next).map(|(p, v)| p * v).sum())
            .collect();
        y[date] = cont
            .iter()
            .zip(&lat.payoff[date])
            .map(|(c, g)| c.max(*g))
            .collect();
        continuation[date] = cont;
    }
    let doob = MartingaleTable {
        increments: (0..n)
            .map(|date| {
                (0..lat.states_per_date[date])
                    .map(|s| {
                        y[date + 1]
                            .iter()
                            .map(|ynext| ynext - continuation[date][s])
                            .collect()
                    })
                    .collect()
            })
            .collect(),
    };
    let compensator_step = (0..n)
        .map(|date| {
            (0..lat.states_per_date[date])
                .map(|s| y[date][s] - continuation[date][s])
                .collect()
        })
        .collect();
    Ok(SnellSolution {
        y,
        continuation,
        doob,
        compensator_step,
    })
}

/// Pathwise dual values computed from the Doob martingale: for every path
/// and every date `n`, `max_{n <= m <= N} (g_m - M_m + M_n)`. The surely
/// optimal identity says each equals `Y_n` at the node the path visits.
pub struct PathDualValues {
    pub paths: Vec<(Vec<usize>, Vec<f64>)>,
    pub max_abs_deviation: f64,
}

pub fn doob_dual_check(sol: &SnellSolution, lat: &LatticeModel) -> PathDualValues {
    let mut paths = Vec::new();
    let mut worst = 0.0f64;
    lat.for_each_path(|path, _prob| {
        let n = lat.n_dates;
        let mut m_cum = vec![0.0; n + 1];
        for date in 0..n {
            m_cum[date + 1] =
                m_cum[date] + sol.doob.increments[date][path[date]][path[date + 1]];
        }
        // Backward running max of g_m - M_m, then add M_n back.
        let mut duals = vec![0.0; n + 1];
        let mut run = f64::NEG_INFINITY;
        for date in (0..=n).rev() {
            run = run.max(lat.payoff[date][path[date]] - m_cum[date]);
            duals[date] = run + m_cum[date];
        }
        for date in 0..=n {
            worst = worst.max((duals[date] - sol.y[date][path[date]]).abs());
        }
        paths.push((path.to_vec(), duals));
    });
    PathDualValues {
        paths,
        max_abs_deviation: worst,
    }
}

/// Exact dual value `E[max_m (g_m - M_m)]` for an arbitrary adapted
/// martingale table. Rejects tables whose conditional means exceed 1e-10
/// since a non-martingale here always signals a broken test fixture.
pub fn dual_value_exact(lat: &LatticeModel, martingale: &MartingaleTable) -> Result<f64> {
    lat.validate()?;
    let drift = martingale.max_conditional_mean(lat);
    if drift > 1e-10 {
        return Err(Error::invalid(format!(
            "martingale table has conditional mean {drift:.3e}"
        )));
    }
    let mut value = 0.0;
    lat.for_each_path(|path, prob| {
        let mut m_cum = 0.0;
        let mut best = f64::NEG_INFINITY;
        for date in 0..=lat.n_dates {
            if date > 0 {
                m_cum += martingale.increments[date - 1][path[date - 1]][path[date]];
            }
            best = best.max(lat.payoff[date][path[date]] - m_cum);
        }
        value += prob * best;
    });
    Ok(value)
}

/// Recombining CRR tree price of a Bermudan option exercisable at the
/// `n_dates + 1` monitoring dates (including time zero).
#[allow(clippy::too_many_arguments)]
pub fn binomial_bermudan_1d(
    s0: f64,
    strike: f64,
    r: f64,
    delta: f64,
    sigma: f64,
    horizon: f64,
    n_dates: usize,
    steps_per_interval: usize,
    call: bool,
) -> Result<f64> {
    if s0 <= 0.0 || strike <= 0.0 || sigma <= 0.0 || horizon <= 0.0 {
        return Err(Error::invalid("prices, volatility and horizon must be positive"));
    }
    if n_dates == 0 || steps_per_interval == 0 {
        return Err(Error::invalid("need at least one interval and one step"));
    }
    let steps = n_dates * steps_per_interval;
    let dt = horizon / steps as f64;
    let u = (sigma * dt.sqrt()).exp();
    let d = 1.0 / u;
    let disc = (-r * dt).exp();
    let growth = ((r - delta) * dt).exp();
    let p = (growth - d) / (u - d);
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::invalid(format!(
            "risk-neutral probability {p} outside [0, 1]; increase steps_per_interval"
        )));
    }
    let intrinsic = |s: f64| {
        if call {
            (s - strike).max(0.0)
        } else {
            (strike - s).max(0.0)
        }
    };

    let mut values: Vec<f64> = (0..=steps)
        .map(|i| intrinsic(s0 * u.powi(i as i32) * d.powi((steps - i) as i32)))
        .collect();
    for step in (0..steps).rev() {
        for i in 0..=step {
            let cont = disc * (p * values[i + 1] + (1.0 - p) * values[i]);
            let s = s0 * u.powi(i as i32) * d.powi((step - i) as i32);
            values[i] = if step % steps_per_interval == 0 {
                cont.max(intrinsic(s))
            } else {
                cont
            };
        }
    }
    Ok(values[0])
}

/// Nested Monte Carlo estimate of the dual integrand
/// `Z(t^n_k, x) = E[V(X_{t_{n+1}}) dW_{t^n_k}] / dt`
/// where `V` is the date-`n+1` value function supplied by the caller (the
/// terminal payoff when `n = N - 1`). Inner increments are antithetic.
/// Returns the estimate and its standard error per dimension.
#[allow(clippy::too_many_arguments)]
pub fn nested_mc_integrand(
    model: &ModelSpec,
    grid: &TimeGrid,
    date: usize,
    substep: usize,
    x: &[f64],
    value_next: &dyn Fn(&[f64]) -> f64,
    inner_paths: usize,
    seed: u64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if inner_paths < 100 {
        return Err(Error::invalid("need at least 100 inner paths"));
    }
    if date >= grid.n_dates() || substep >= grid.n_substeps() {
        return Err(Error::invalid("(date, substep) outside the grid"));
    }
    if x.len() != model.dim {
        return Err(Error::invalid("state has wrong dimension"));
    }
    let dim = model.dim;
    let dt = grid.dt();
    let sqrt_dt = dt.sqrt();
    let first_node = grid.date_node(date) + substep;
    let last_node = grid.date_node(date + 1);
    let n_steps = last_node - first_node;
    let n_pairs = inner_paths.div_ceil(2);

    let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(seed, "nested-mc", date as u64, substep as u64));
    let mut samples: Vec<Vec<f64>> = vec![Vec::with_capacity(n_pairs); dim];
    let mut dw = vec![0.0; n_steps * dim];
    for _ in 0..n_pairs {
        for z in dw.iter_mut() {
            let draw: f64 = StandardNormal.sample(&mut rng);
            *z = draw * sqrt_dt;
        }
        let mut pair_values = [0.0f64; 2];
        for (sign_idx, sign) in [1.0f64, -1.0].iter().enumerate() {
            let mut state = x.to_vec();
            for step in 0..n_steps {
                let t = grid.node_time(first_node + step);
                let step_dw: Vec<f64> =
                    dw[step * dim..(step + 1) * dim].iter().map(|v| sign * v).collect();
                state = model.euler_step(t, &state, dt, &step_dw);
            }
            pair_values[sign_idx] = value_next(&state);
        }
        for d in 0..dim {
            let first_dw = dw[d];
            let sample = 0.5
                * (pair_values[0] * first_dw + pair_values[1] * (-first_dw))
                / dt;
            samples[d].push(sample);
        }
    }
    let mut estimate = vec![0.0; dim];
    let mut se = vec![0.0; dim];
    for d in 0..dim {
        estimate[d] = stats::mean(&samples[d]);
        se[d] = (stats::sample_variance(&samples[d])? / n_pairs as f64).sqrt();
    }
    Ok((estimate, se))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Deterministic single-path lattice with payoffs g.
    fn chain(g: &[f64]) -> LatticeModel {
        let n = g.len() - 1;
        LatticeModel {
            n_dates: n,
            states_per_date: vec![1; n + 1],
            transition: vec![vec![vec![1.0]]; n],
            payoff: g.iter().map(|v| vec![*v]).collect(),
        }
    }

    fn one_period_binomial() -> LatticeModel {
        // 100 -> {120 w.p. 0.5, 80 w.p. 0.5}, call K=100 undiscounted.
        LatticeModel {
            n_dates: 1,
            states_per_date: vec![1, 2],
            transition: vec![vec![vec![0.5, 0.5]]],
            payoff: vec![vec![0.0], vec![20.0, 0.0]],
        }
    }

    #[test]
    fn deterministic_chain_takes_the_running_max() {
        let sol = snell_envelope_exact(&chain(&[1.0, 3.0, 2.0])).unwrap();
        assert_eq!(sol.y[0][0], 3.0);
        assert_eq!(sol.y[1][0], 3.0);
        assert_eq!(sol.y[2][0], 2.0);
    }

    #[test]
    fn one_period_binomial_call() {
        let sol = snell_envelope_exact(&one_period_binomial()).unwrap();
        assert_eq!(sol.y[0][0], 10.0);
    }

    #[test]
    fn snell_dominates_payoff_and_continuation() {
        for seed in 0..20 {
            let lat = LatticeModel::random(seed);
            let sol = snell_envelope_exact(&lat).unwrap();
            for n in 0..=lat.n_dates {
                for s in 0..lat.states_per_date[n] {
                    assert!(sol.y[n][s] >= lat.payoff[n][s]);
                    if n < lat.n_dates {
                        assert!(sol.y[n][s] >= sol.continuation[n][s] - 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn doob_martingale_attains_the_envelope_pathwise() {
        for seed in 100..120 {
            let lat = LatticeModel::random(seed);
            let sol = snell_envelope_exact(&lat).unwrap();
            let check = doob_dual_check(&sol, &lat);
            assert!(
                check.max_abs_deviation < 1e-10,
                "seed {seed}: deviation {}",
                check.max_abs_deviation
            );
        }
    }

    #[test]
    fn perturbed_doob_martingale_exceeds_the_envelope_somewhere() {
        let lat = LatticeModel::random(7);
        let sol = snell_envelope_exact(&lat).unwrap();
        let y0_mean: f64 =
            sol.y[0].iter().sum::<f64>() / sol.y[0].len() as f64;
        // Shift one increment row by a centered bump: still a martingale,
        // no longer the Doob one.
        let mut bumped = sol.doob.clone();
        let row = &mut bumped.increments[0][0];
        let probs = &lat.transition[0][0];
        row[0] += 1.0;
        let mean: f64 = probs.iter().zip(row.iter()).map(|(p, x)| p * x).sum();
        for x in row.iter_mut() {
            *x -= mean;
        }
        let perturbed = dual_value_exact(&lat, &bumped).unwrap();
        let exact = dual_value_exact(&lat, &sol.doob).unwrap();
        assert!((exact - y0_mean).abs() < 1e-10);
        assert!(perturbed > exact + 1e-6, "{perturbed} vs {exact}");
    }

    #[test]
    fn weak_duality_for_random_martingales() {
        for seed in 0..10 {
            let lat = LatticeModel::random(seed);
            let sol = snell_envelope_exact(&lat).unwrap();
            let y0_mean: f64 = sol.y[0].iter().sum::<f64>() / sol.y[0].len() as f64;
            for ms in 0..20 {
                let m = MartingaleTable::random_centered(&lat, seed * 1000 + ms);
                let v = dual_value_exact(&lat, &m).unwrap();
                assert!(v >= y0_mean - 1e-10, "seed {seed}/{ms}: {v} < {y0_mean}");
            }
            let zero = MartingaleTable {
                increments: sol
                    .doob
                    .increments
                    .iter()
                    .map(|d| d.iter().map(|r| vec![0.0; r.len()]).collect())
                    .collect(),
            };
            let v_zero = dual_value_exact(&lat, &zero).unwrap();
            assert!(v_zero >= y0_mean - 1e-10);
        }
    }

    #[test]
    fn zero_martingale_is_strictly_loose_with_real_optionality() {
        let lat = one_period_binomial();
        let sol = snell_envelope_exact(&lat).unwrap();
        let zero = MartingaleTable {
            increments: vec![vec![vec![0.0, 0.0]]],
        };
        // E[max(g_0, g_1)] = 0.5*20 = 10 equals Y_0 here; use a chain with
        // optionality instead: add a middle date.
        let v = dual_value_exact(&lat, &zero).unwrap();
        assert!(v >= sol.y[0][0] - 1e-12);

        let lat2 = LatticeModel {
            n_dates: 2,
            states_per_date: vec![1, 2, 2],
            transition: vec![
                vec![vec![0.5, 0.5]],
                vec![vec![0.5, 0.5], vec![0.5, 0.5]],
            ],
            payoff: vec![vec![5.0], vec![9.0, 1.0], vec![12.0, 0.0]],
        };
        let sol2 = snell_envelope_exact(&lat2).unwrap();
        let zero2 = MartingaleTable {
            increments: vec![
                vec![vec![0.0, 0.0]],
                vec![vec![0.0, 0.0], vec![0.0, 0.0]],
            ],
        };
        let v2 = dual_value_exact(&lat2, &zero2).unwrap();
        assert!(v2 > sol2.y[0][0] + 1e-9, "{v2} vs {}", sol2.y[0][0]);
    }

    #[test]
    fn dual_value_is_convex_between_doob_and_zero() {
        let lat = LatticeModel::random(3);
        let sol = snell_envelope_exact(&lat).unwrap();
        let zero = MartingaleTable {
            increments: sol
                .doob
                .increments
                .iter()
                .map(|d| d.iter().map(|r| vec![0.0; r.len()]).collect())
                .collect(),
        };
        let mid = MartingaleTable {
            increments: sol
                .doob
                .increments
                .iter()
                .map(|d| {
                    d.iter()
                        .map(|r| r.iter().map(|x| 0.5 * x).collect())
                        .collect()
                })
                .collect(),
        };
        let v_doob = dual_value_exact(&lat, &sol.doob).unwrap();
        let v_zero = dual_value_exact(&lat, &zero).unwrap();
        let v_mid = dual_value_exact(&lat, &mid).unwrap();
        assert!(v_doob <= v_mid + 1e-12);
        assert!(v_mid <= 0.5 * (v_doob + v_zero) + 1e-12);
        assert!(v_mid <= v_zero + 1e-12);
    }

    #[test]
    fn non_martingale_tables_are_rejected() {
        let lat = one_period_binomial();
        let bad = MartingaleTable {
            increments: vec![vec![vec![1.0, 0.5]]],
        };
        assert!(dual_value_exact(&lat, &bad).is_err());
    }

    #[test]
    fn doob_decomposition_reconstructs_the_envelope() {
        for seed in 40..60 {
            let lat = LatticeModel::random(seed);
            let sol = snell_envelope_exact(&lat).unwrap();
            lat.for_each_path(|path, _| {
                let mut m = 0.0;
                let mut a = 0.0;
                let mut prev_a = 0.0;
                for date in 0..=lat.n_dates {
                    if date > 0 {
                        m += sol.doob.increments[date - 1][path[date - 1]][path[date]];
                        a += sol.compensator_step[date - 1][path[date - 1]];
                    }
                    assert!(a + 1e-12 >= prev_a, "compensator must not decrease");
                    prev_a = a;
                    let recon = sol.y[0][path[0]] + m - a;
                    assert!(
                        (recon - sol.y[date][path[date]]).abs() < 1e-10,
                        "seed {seed} date {date}"
                    );
                }
            });
        }
    }

    #[test]
    fn binomial_converges_to_intrinsic_for_tiny_volatility() {
        // Deep ITM put, r = 0 so no time value: price -> intrinsic.
        let price = binomial_bermudan_1d(50.0, 100.0, 0.0, 0.0, 1e-4, 1.0, 4, 50, false).unwrap();
        assert!((price - 50.0).abs() < 1e-6, "{price}");
    }

    fn black_scholes_put(s0: f64, k: f64, r: f64, delta: f64, sigma: f64, t: f64) -> f64 {
        let d1 = ((s0 / k).ln() + (r - delta + 0.5 * sigma * sigma) * t) / (sigma * t.sqrt());
        let d2 = d1 - sigma * t.sqrt();
        k * (-r * t).exp() * stats::normal_cdf(-d2)
            - s0 * (-delta * t).exp() * stats::normal_cdf(-d1)
    }

    #[test]
    fn binomial_european_limit_matches_black_scholes() {
        // One monitoring interval, out-of-the-money-at-zero put: immediate
        // exercise is worthless, so the Bermudan price is the European one.
        let (s0, k, r, delta, sigma, t) = (110.0, 100.0, 0.05, 0.0, 0.2, 1.0);
        let tree = binomial_bermudan_1d(s0, k, r, delta, sigma, t, 1, 2000, false).unwrap();
        let bs = black_scholes_put(s0, k, r, delta, sigma, t);
        assert!((tree - bs).abs() < 0.01, "tree {tree} vs bs {bs}");
    }

    #[test]
    fn binomial_rejects_degenerate_parameters() {
        assert!(binomial_bermudan_1d(-1.0, 100.0, 0.0, 0.0, 0.2, 1.0, 1, 10, true).is_err());
        assert!(binomial_bermudan_1d(100.0, 100.0, 0.0, 0.0, 0.2, 1.0, 0, 10, true).is_err());
        // Tiny volatility with positive rates pushes p outside [0,1].
        assert!(binomial_bermudan_1d(100.0, 100.0, 0.10, 0.0, 1e-6, 1.0, 1, 10, true).is_err());
    }

    #[test]
    fn nested_mc_recovers_the_unit_integrand_of_brownian_identity_payoff() {
        // X = W, V(x) = x: Z = E[(x + dW_total) dW_first] / dt = 1.
        let model = ModelSpec::brownian_1d(10.0);
        let grid = TimeGrid::new(1.0, 1, 10).unwrap();
        let value = |x: &[f64]| x[0];
        for (k, x) in [(0usize, 10.0f64), (4, 9.3), (9, 11.0)] {
            let (est, se) =
                nested_mc_integrand(&model, &grid, 0, k, &[x], &value, 20_000, 5).unwrap();
            assert!(
                (est[0] - 1.0).abs() < 3.0 * se[0].max(1e-3),
                "k={k}: {} +- {}",
                est[0],
                se[0]
            );
        }
    }

    #[test]
    fn nested_mc_of_constant_value_function_is_zero() {
        let model = ModelSpec::brownian_1d(0.0);
        let grid = TimeGrid::new(1.0, 1, 4).unwrap();
        let value = |_: &[f64]| 7.5;
        let (est, se) = nested_mc_integrand(&model, &grid, 0, 0, &[0.0], &value, 5_000, 9).unwrap();
        assert!(est[0].abs() < 4.0 * se[0].max(1e-6), "{} +- {}", est[0], se[0]);
    }

    #[test]
    fn nested_mc_validates_arguments() {
        let model = ModelSpec::brownian_1d(0.0);
        let grid = TimeGrid::new(1.0, 1, 4).unwrap();
        let value = |_: &[f64]| 0.0;
        assert!(nested_mc_integrand(&model, &grid, 0, 0, &[0.0], &value, 50, 1).is_err());
        assert!(nested_mc_integrand(&model, &grid, 1, 0, &[0.0], &value, 500, 1).is_err());
        assert!(nested_mc_integrand(&model, &grid, 0, 9, &[0.0], &value, 500, 1).is_err());
    }

    #[test]
    fn lattice_json_round_trip() {
        let lat = LatticeModel::random(5);
        let text = serde_json::to_string(&lat).unwrap();
        let back = LatticeModel::from_json(&text).unwrap();
        assert_eq!(lat, back);
    }

    #[test]
    fn lattice_validation_catches_bad_rows() {
        let mut lat = one_period_binomial();
        lat.transition[0][0] = vec![0.6, 0.6];
        assert!(lat.validate().is_err());
        let mut lat2 = one_period_binomial();
        lat2.transition[0][0] = vec![1.5, -0.5];
        assert!(lat2.validate().is_err());
    }
}
