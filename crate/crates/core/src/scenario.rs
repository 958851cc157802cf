//! Finite volatility families standing in for the uncertainty set Θ.
//!
//! A [`ScenarioSet`] holds `l × l` loading matrices `β_k`. Under scenario `k`
//! the canonical process has covariance rate `β_k β_kᵀ`; sublinear
//! expectations are maxima of the per-scenario linear expectations.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::rng::{stream, Purpose};
use crate::stats::{mean_se, MeanEstimate};

/// Eigenvalues above this (negative) threshold are treated as zero.
pub const PSD_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioSet {
    l: usize,
    matrices: Vec<DMatrix<f64>>,
    sigma_bar: f64,
}

/// Serialized form: `{"l": 2, "matrices": [[[1,0],[0,1]], ...]}` (row-major).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSetSpec {
    pub l: usize,
    pub matrices: Vec<Vec<Vec<f64>>>,
}

impl ScenarioSet {
    pub fn new(l: usize, matrices: Vec<DMatrix<f64>>) -> Result<Self> {
        if l == 0 {
            return Err(LabError::usage("scenario dimension l must be at least 1"));
        }
        if matrices.is_empty() {
            return Err(LabError::usage("scenario set must not be empty"));
        }
        for (k, m) in matrices.iter().enumerate() {
            if m.nrows() != l || m.ncols() != l {
                return Err(LabError::usage(format!(
                    "scenario {k} is {}x{}, expected {l}x{l}",
                    m.nrows(),
                    m.ncols()
                )));
            }
            if m.iter().any(|v| !v.is_finite()) {
                return Err(LabError::usage(format!("scenario {k} has non-finite entries")));
            }
        }
        let sigma_bar = compute_sigma_bar(&matrices)?;
        Ok(Self {
            l,
            matrices,
            sigma_bar,
        })
    }

    /// Scalar scenarios `{[s_1], [s_2], ...}` for `l = 1`.
    pub fn scalar(values: &[f64]) -> Result<Self> {
        Self::new(
            1,
            values.iter().map(|&v| DMatrix::from_element(1, 1, v)).collect(),
        )
    }

    pub fn from_spec(spec: &ScenarioSetSpec) -> Result<Self> {
        let mut mats = Vec::with_capacity(spec.matrices.len());
        for (k, rows) in spec.matrices.iter().enumerate() {
            if rows.len() != spec.l || rows.iter().any(|r| r.len() != spec.l) {
                return Err(LabError::usage(format!(
                    "scenario {k} is not {l}x{l}",
                    l = spec.l
                )));
            }
            mats.push(DMatrix::from_fn(spec.l, spec.l, |i, j| rows[i][j]));
        }
        Self::new(spec.l, mats)
    }

    pub fn to_spec(&self) -> ScenarioSetSpec {
        ScenarioSetSpec {
            l: self.l,
            matrices: self
                .matrices
                .iter()
                .map(|m| (0..self.l).map(|i| m.row(i).iter().copied().collect()).collect())
                .collect(),
        }
    }

    pub fn l(&self) -> usize {
        self.l
    }

    pub fn len(&self) -> usize {
        self.matrices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.matrices.is_empty()
    }

    pub fn matrix(&self, k: usize) -> &DMatrix<f64> {
        &self.matrices[k]
    }

    pub fn matrices(&self) -> &[DMatrix<f64>] {
        &self.matrices
    }

    /// Covariance rate `β_k β_kᵀ` of scenario `k`.
    pub fn covariance(&self, k: usize) -> DMatrix<f64> {
        let b = &self.matrices[k];
        b * b.transpose()
    }

    /// Smallest `c` with `β_k β_kᵀ ⪯ c² I` for every `k`.
    pub fn sigma_bar(&self) -> f64 {
        self.sigma_bar
    }

    /// `G(A) = ½ max_k tr(β_k β_kᵀ A)`.
    pub fn g_function(&self, a: &DMatrix<f64>) -> Result<f64> {
        if a.nrows() != self.l || a.ncols() != self.l {
            return Err(LabError::usage(format!(
                "G-function argument is {}x{}, expected {l}x{l}",
                a.nrows(),
                a.ncols(),
                l = self.l
            )));
        }
        Ok(self
            .matrices
            .iter()
            .map(|b| 0.5 * (b * b.transpose() * a).trace())
            .fold(f64::NEG_INFINITY, f64::max))
    }
}

/// Free-function form of [`ScenarioSet::g_function`].
pub fn g_function(a: &DMatrix<f64>, set: &ScenarioSet) -> Result<f64> {
    set.g_function(a)
}

pub fn sigma_bar(set: &ScenarioSet) -> f64 {
    set.sigma_bar()
}

fn compute_sigma_bar(mats: &[DMatrix<f64>]) -> Result<f64> {
    let mut max_eig: f64 = 0.0;
    for m in mats {
        let cov = m * m.transpose();
        let eig = SymmetricEigen::new(cov);
        for &ev in eig.eigenvalues.iter() {
            if ev < -PSD_TOLERANCE {
                return Err(LabError::NotPsd {
                    min_eigenvalue: ev,
                    location: None,
                });
            }
            max_eig = max_eig.max(ev.max(0.0));
        }
    }
    Ok(max_eig.sqrt())
}

/// Piecewise-constant control: scenario index used on each time step.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ControlSchedule {
    steps: Vec<usize>,
}

impl ControlSchedule {
    pub fn new(steps: Vec<usize>, set: &ScenarioSet, n_steps: usize) -> Result<Self> {
        if steps.len() != n_steps {
            return Err(LabError::usage(format!(
                "control schedule has {} entries, grid has {n_steps} steps",
                steps.len()
            )));
        }
        if let Some(bad) = steps.iter().find(|&&k| k >= set.len()) {
            return Err(LabError::usage(format!(
                "control schedule refers to scenario {bad}, only {} exist",
                set.len()
            )));
        }
        Ok(Self { steps })
    }

    pub fn constant(k: usize, set: &ScenarioSet, n_steps: usize) -> Result<Self> {
        Self::new(vec![k; n_steps], set, n_steps)
    }

    /// Random schedule with `pieces` constant stretches.
    pub fn random_piecewise(
        set: &ScenarioSet,
        n_steps: usize,
        pieces: usize,
        seed: u64,
        index: u64,
    ) -> Result<Self> {
        let mut rng = stream(seed, Purpose::Schedule, index);
        let pieces = pieces.clamp(1, n_steps.max(1));
        let mut cuts: Vec<usize> = (0..pieces - 1).map(|_| rng.random_range(1..n_steps.max(2))).collect();
        cuts.sort_unstable();
        let mut steps = Vec::with_capacity(n_steps);
        let mut piece = 0;
        let mut k = rng.random_range(0..set.len());
        for i in 0..n_steps {
            while piece < cuts.len() && i >= cuts[piece] {
                piece += 1;
                k = rng.random_range(0..set.len());
            }
            steps.push(k);
        }
        Self::new(steps, set, n_steps)
    }

    pub fn steps(&self) -> &[usize] {
        &self.steps
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn scenario_at(&self, step: usize) -> usize {
        self.steps[step]
    }

    /// Same control on a grid with `factor` times as many steps.
    pub fn refine(&self, factor: usize) -> Self {
        Self {
            steps: self.steps.iter().flat_map(|&k| std::iter::repeat_n(k, factor)).collect(),
        }
    }

    /// Constant schedule index if the control never switches.
    pub fn constant_scenario(&self) -> Option<usize> {
        let first = *self.steps.first()?;
        self.steps.iter().all(|&k| k == first).then_some(first)
    }
}

/// All constant schedules followed by `n_random` random piecewise-constant ones.
pub fn enumerate_schedules(
    set: &ScenarioSet,
    n_steps: usize,
    n_random: usize,
    pieces: usize,
    seed: u64,
) -> Result<Vec<ControlSchedule>> {
    let mut out = Vec::with_capacity(set.len() + n_random);
    for k in 0..set.len() {
        out.push(ControlSchedule::constant(k, set, n_steps)?);
    }
    for r in 0..n_random {
        out.push(ControlSchedule::random_piecewise(
            set,
            n_steps,
            pieces,
            seed,
            r as u64,
        )?);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UpperExpectation {
    pub value: f64,
    /// Scenario attaining the maximum (first on ties).
    pub argmax: usize,
    pub per_scenario: Vec<MeanEstimate>,
}

impl UpperExpectation {
    /// Estimate at the maximising scenario.
    pub fn attained(&self) -> MeanEstimate {
        self.per_scenario[self.argmax]
    }
}

/// Sublinear expectation as the maximum over scenarios of the sample means.
pub fn upper_expectation<S: AsRef<[f64]> + Sync>(per_scenario: &[S]) -> Result<UpperExpectation> {
    if per_scenario.is_empty() {
        return Err(LabError::usage("upper expectation needs at least one scenario"));
    }
    if let Some(k) = per_scenario.iter().position(|s| s.as_ref().is_empty()) {
        return Err(LabError::usage(format!("scenario {k} has no samples")));
    }
    let per: Vec<MeanEstimate> = per_scenario.par_iter().map(|s| mean_se(s.as_ref())).collect();
    let mut argmax = 0;
    for (k, e) in per.iter().enumerate() {
        if e.mean > per[argmax].mean {
            argmax = k;
        }
    }
    Ok(UpperExpectation {
        value: per[argmax].mean,
        argmax,
        per_scenario: per,
    })
}

/// Upper capacity of an event from per-scenario indicator samples.
pub fn capacity_estimate<S: AsRef<[f64]> + Sync>(indicators: &[S]) -> Result<f64> {
    for (k, s) in indicators.iter().enumerate() {
        if s.as_ref().iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(LabError::usage(format!(
                "scenario {k} has indicator samples outside {{0, 1}}"
            )));
        }
    }
    Ok(upper_expectation(indicators)?.value)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sym(l: usize, vals: &[f64]) -> DMatrix<f64> {
        let m = DMatrix::from_row_slice(l, l, vals);
        (&m + m.transpose()) * 0.5
    }

    #[test]
    fn g_of_zero_is_zero() {
        let s = ScenarioSet::scalar(&[1.0, 3.0]).unwrap();
        assert_eq!(s.g_function(&DMatrix::zeros(1, 1)).unwrap(), 0.0);
    }

    #[test]
    fn g_singleton_identity() {
        let s = ScenarioSet::scalar(&[1.0]).unwrap();
        assert_eq!(s.g_function(&DMatrix::identity(1, 1)).unwrap(), 0.5);
    }

    #[test]
    fn g_takes_the_largest_scenario() {
        // enumerate: ½·1·1 = 0.5 and ½·4·1 = 2.0
        let s = ScenarioSet::scalar(&[1.0, 2.0]).unwrap();
        assert_eq!(s.g_function(&DMatrix::identity(1, 1)).unwrap(), 2.0);
    }

    #[test]
    fn g_dimension_mismatch() {
        let s = ScenarioSet::scalar(&[1.0]).unwrap();
        assert!(matches!(
            s.g_function(&DMatrix::identity(2, 2)),
            Err(LabError::Usage(_))
        ));
    }

    #[test]
    fn sigma_bar_examples() {
        let id = ScenarioSet::new(2, vec![DMatrix::identity(2, 2)]).unwrap();
        assert!((id.sigma_bar() - 1.0).abs() < 1e-14);
        let diag = ScenarioSet::new(2, vec![DMatrix::from_diagonal(&nalgebra::dvector![1.0, 2.0])]).unwrap();
        assert!((diag.sigma_bar() - 2.0).abs() < 1e-14);
        let zero = ScenarioSet::scalar(&[0.0]).unwrap();
        assert_eq!(zero.sigma_bar(), 0.0);
    }

    #[test]
    fn invalid_sets_rejected() {
        assert!(ScenarioSet::new(1, vec![]).is_err());
        assert!(ScenarioSet::new(2, vec![DMatrix::identity(1, 1)]).is_err());
        assert!(ScenarioSet::scalar(&[f64::NAN]).is_err());
    }

    #[test]
    fn spec_round_trip() {
        let s = ScenarioSet::new(
            2,
            vec![DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 2.0])],
        )
        .unwrap();
        let json_like = s.to_spec();
        assert_eq!(ScenarioSet::from_spec(&json_like).unwrap(), s);
    }

    #[test]
    fn upper_expectation_examples() {
        assert_eq!(upper_expectation(&[vec![1.0, 1.0], vec![0.0, 0.0]]).unwrap().value, 1.0);
        assert_eq!(upper_expectation(&[vec![2.0]]).unwrap().value, 2.0);
        let e = upper_expectation(&[vec![1.0, 3.0], vec![4.0, 0.0]]).unwrap();
        assert_eq!(e.value, 2.0);
        assert_eq!(e.argmax, 0);
        assert!(upper_expectation(&[vec![1.0], vec![]]).is_err());
        assert!(upper_expectation::<Vec<f64>>(&[]).is_err());
    }

    #[test]
    fn capacity_examples() {
        assert_eq!(capacity_estimate(&[vec![0.0; 4], vec![0.0; 3]]).unwrap(), 0.0);
        assert_eq!(capacity_estimate(&[vec![1.0; 4], vec![1.0; 2]]).unwrap(), 1.0);
        assert_eq!(
            capacity_estimate(&[vec![1.0, 0.0, 0.0, 0.0], vec![0.0, 0.0, 1.0, 1.0]]).unwrap(),
            0.5
        );
        assert!(capacity_estimate(&[vec![0.5]]).is_err());
    }

    #[test]
    fn schedules() {
        let s = ScenarioSet::scalar(&[1.0, 2.0, 3.0]).unwrap();
        assert!(ControlSchedule::new(vec![0, 1], &s, 3).is_err());
        assert!(ControlSchedule::new(vec![0, 1, 3], &s, 3).is_err());
        let all = enumerate_schedules(&s, 16, 4, 3, 7).unwrap();
        assert_eq!(all.len(), 7);
        assert_eq!(all[1].constant_scenario(), Some(1));
        for sch in &all {
            assert_eq!(sch.len(), 16);
            assert!(sch.steps().iter().all(|&k| k < 3));
        }
        let again = enumerate_schedules(&s, 16, 4, 3, 7).unwrap();
        assert_eq!(all, again);
    }

    fn scenario_strategy() -> impl Strategy<Value = ScenarioSet> {
        prop::collection::vec(prop::collection::vec(-2.0f64..2.0, 4), 1..4)
            .prop_map(|ms| ScenarioSet::new(2, ms.iter().map(|v| DMatrix::from_row_slice(2, 2, v)).collect()).unwrap())
    }

    proptest! {
        #[test]
        fn g_positively_homogeneous(set in scenario_strategy(), a in prop::collection::vec(-3.0f64..3.0, 4), t in 0.0f64..5.0) {
            let a = sym(2, &a);
            let lhs = set.g_function(&(&a * t)).unwrap();
            let rhs = t * set.g_function(&a).unwrap();
            prop_assert!((lhs - rhs).abs() <= 1e-10 * (1.0 + rhs.abs()));
        }

        #[test]
        fn g_sublinear(set in scenario_strategy(), a in prop::collection::vec(-3.0f64..3.0, 4), b in prop::collection::vec(-3.0f64..3.0, 4)) {
            let a = sym(2, &a);
            let b = sym(2, &b);
            let lhs = set.g_function(&(&a + &b)).unwrap();
            let rhs = set.g_function(&a).unwrap() + set.g_function(&b).unwrap();
            prop_assert!(lhs <= rhs + 1e-10);
        }

        #[test]
        fn sigma_bar_dominates(set in scenario_strategy(), angle in 0.0f64..std::f64::consts::TAU) {
            let v = nalgebra::dvector![angle.cos(), angle.sin()];
            let sb2 = set.sigma_bar().powi(2);
            for k in 0..set.len() {
                let q = (v.transpose() * set.covariance(k) * &v)[(0, 0)];
                prop_assert!(q <= sb2 * (1.0 + 1e-12) + 1e-12);
            }
        }

        #[test]
        fn upper_expectation_monotone(base in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 1..20), 1..4), bump in 0.0f64..3.0) {
            let bigger: Vec<Vec<f64>> = base.iter().map(|s| s.iter().map(|x| x + bump).collect()).collect();
            prop_assert!(upper_expectation(&bigger).unwrap().value >= upper_expectation(&base).unwrap().value - 1e-12);
        }
    }
}
