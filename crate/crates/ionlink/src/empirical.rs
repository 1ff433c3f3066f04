//! Empirical ion–ion density-matrix model: detector background as white
//! noise, photon distinguishability as dephasing parameterized by `V`, and
//! imperfect ion–photon entanglement as depolarization.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hilbert::{c, Mat4, C64};
use crate::pbsm::{Detector, DetectorTable, PSI_MINUS_PAIRS, PSI_PLUS_PAIRS};
use crate::tomography::{bell_fidelity, bell_projector, BellSign};

/// Per-attempt coincidence probabilities of one detector pair.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BackgroundBudget {
    pub p_ph_ph: f64,
    pub p_ph_bg: f64,
    pub p_bg_bg: f64,
}

impl BackgroundBudget {
    pub fn p_tot_bg(&self) -> f64 {
        self.p_ph_bg + self.p_bg_bg
    }

    /// `Σ p_mn`.
    pub fn total(&self) -> f64 {
        self.p_ph_ph + self.p_tot_bg()
    }

    pub fn mean(budgets: &[BackgroundBudget]) -> BackgroundBudget {
        let n = budgets.len().max(1) as f64;
        BackgroundBudget {
            p_ph_ph: budgets.iter().map(|b| b.p_ph_ph).sum::<f64>() / n,
            p_ph_bg: budgets.iter().map(|b| b.p_ph_bg).sum::<f64>() / n,
            p_bg_bg: budgets.iter().map(|b| b.p_bg_bg).sum::<f64>() / n,
        }
    }

    /// Rescale photon–photon by `f_ph` and both background terms by `f_bg`.
    pub fn scaled(&self, f_ph: f64, f_bg: f64) -> BackgroundBudget {
        BackgroundBudget { p_ph_ph: self.p_ph_ph * f_ph, p_ph_bg: self.p_ph_bg * f_bg, p_bg_bg: self.p_bg_bg * f_bg }
    }

    fn validate(&self) -> Result<()> {
        if [self.p_ph_ph, self.p_ph_bg, self.p_bg_bg].iter().any(|p| !(*p >= 0.0)) {
            return Err(Error::InvalidParameter("coincidence probabilities must be nonnegative".into()));
        }
        Ok(())
    }
}

pub fn coincidence_probs(table: &DetectorTable, d1: Detector, d2: Detector) -> Result<BackgroundBudget> {
    if d1 == d2 {
        return Err(Error::InvalidParameter("a coincidence needs two different detectors".into()));
    }
    let (a1, b1, g1) = (table.p_det(0, d1), table.p_det(1, d1), table.row(d1).p_bg_det);
    let (a2, b2, g2) = (table.p_det(0, d2), table.p_det(1, d2), table.row(d2).p_bg_det);
    Ok(BackgroundBudget { p_ph_ph: a1 * b2 + b1 * a2, p_ph_bg: (a1 + b1) * g2 + (a2 + b2) * g1, p_bg_bg: g1 * g2 })
}

/// Budget of the pairs heralding `sign`; averaged over pairs for `Ψ−`.
pub fn herald_budget(table: &DetectorTable, sign: BellSign) -> Result<BackgroundBudget> {
    let pairs: &[(Detector, Detector)] = match sign {
        BellSign::Plus => &PSI_PLUS_PAIRS,
        BellSign::Minus => &PSI_MINUS_PAIRS,
    };
    let budgets = pairs.iter().map(|&(x, y)| coincidence_probs(table, x, y)).collect::<Result<Vec<_>>>()?;
    Ok(BackgroundBudget::mean(&budgets))
}

/// Checks Hermiticity, unit trace and positivity.
pub fn validate_state(rho: &Mat4) -> Result<()> {
    if (rho - rho.adjoint()).camax() > 1e-12 {
        return Err(Error::Consistency("state is not Hermitian".into()));
    }
    if (rho.trace().re - 1.0).abs() > 1e-12 {
        return Err(Error::Consistency(format!("state trace {} != 1", rho.trace().re)));
    }
    let min = rho.symmetric_eigenvalues().min();
    if min < -1e-10 {
        return Err(Error::Consistency(format!("state has negative eigenvalue {min:e}")));
    }
    Ok(())
}

/// Background-count state from the correlator probabilities `p_mn`:
/// diagonal `(p_D'D', p_D'D, p_DD', p_DD)` and coherence `±e^{iφ} p_ph-ph/2`.
pub fn rho_with_background(b: &BackgroundBudget, sign: BellSign, phi: f64) -> Result<Mat4> {
    b.validate()?;
    let total = b.total();
    if !(total > 0.0) {
        return Err(Error::Degenerate("no coincidences: all probabilities vanish".into()));
    }
    let same = b.p_tot_bg() / 4.0;
    let opposite = b.p_ph_ph / 2.0 + b.p_tot_bg() / 4.0;
    let coh = C64::from_polar(sign.value() * b.p_ph_ph / 2.0, phi);
    let mut rho = Mat4::from_diagonal(&nalgebra::Vector4::new(c(same), c(opposite), c(opposite), c(same)));
    rho[(1, 2)] = coh;
    rho[(2, 1)] = coh.conj();
    Ok(rho / c(total))
}

/// White-noise form `(p_ph-ph ρ± + p_tot-bg I/4) / Σp_mn`.
pub fn rho_with_background_white_noise(b: &BackgroundBudget, sign: BellSign, phi: f64) -> Result<Mat4> {
    b.validate()?;
    let total = b.total();
    if !(total > 0.0) {
        return Err(Error::Degenerate("no coincidences: all probabilities vanish".into()));
    }
    Ok((bell_projector(sign, phi) * c(b.p_ph_ph) + Mat4::identity() * c(b.p_tot_bg() / 4.0)) / c(total))
}

/// `V ρ + (1 − V) diag(ρ)` with `V` clamped to `[0, 1]`.
pub fn apply_dephasing(rho: &Mat4, v: f64) -> Mat4 {
    let v = v.clamp(0.0, 1.0);
    let diag = Mat4::from_diagonal(&rho.diagonal());
    rho * c(v) + diag * c(1.0 - v)
}

fn check_fidelity(f: f64) -> Result<()> {
    if !(0.25..=1.0).contains(&f) {
        return Err(Error::Domain(format!("ion-photon fidelity {f} outside [0.25, 1]")));
    }
    Ok(())
}

/// Ion–ion fidelity after swapping two depolarized ion–photon pairs.
pub fn ion_ion_fidelity(f_a: f64, f_b: f64) -> Result<f64> {
    check_fidelity(f_a)?;
    check_fidelity(f_b)?;
    let w = |f: f64| (4.0 * f - 1.0) / 3.0;
    Ok(0.25 * (1.0 + 3.0 * w(f_a) * w(f_b)))
}

pub fn depolarizing_lambda(f_ii: f64) -> f64 {
    (4.0 * f_ii - 1.0) / 3.0
}

pub fn depolarizing_correction(rho: &Mat4, f_a: f64, f_b: f64) -> Result<Mat4> {
    let lambda = depolarizing_lambda(ion_ion_fidelity(f_a, f_b)?);
    Ok(rho * c(lambda) + Mat4::identity() * c((1.0 - lambda) / 4.0))
}

/// Full model state: background, then dephasing (skipped when `v` is `None`), then depolarization.
pub fn model_state(b: &BackgroundBudget, v: Option<f64>, f_ip: (f64, f64), sign: BellSign, phi: f64) -> Result<Mat4> {
    let mut rho = rho_with_background(b, sign, phi)?;
    if let Some(v) = v {
        rho = apply_dephasing(&rho, v);
    }
    depolarizing_correction(&rho, f_ip.0, f_ip.1)
}

/// Fraction of uniformly distributed click pairs in a window of length `len`
/// with `|t1 − t2| ≤ T`.
pub fn uniform_band_fraction(t: f64, len: f64) -> f64 {
    if t >= len {
        1.0
    } else if t <= 0.0 {
        0.0
    } else {
        1.0 - (1.0 - t / len).powi(2)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FidelityInputs {
    pub budget_plus: BackgroundBudget,
    pub budget_minus: BackgroundBudget,
    pub f_ip: (f64, f64),
    pub phi: f64,
    /// Detection-window length the budgets refer to (s).
    pub window: f64,
}

impl FidelityInputs {
    pub fn from_table(table: &DetectorTable, f_ip: (f64, f64)) -> Result<Self> {
        Ok(FidelityInputs {
            budget_plus: herald_budget(table, BellSign::Plus)?,
            budget_minus: herald_budget(table, BellSign::Minus)?,
            f_ip,
            phi: 0.0,
            window: table.window_length(),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FidelityPoint {
    pub t: f64,
    pub v: f64,
    pub f_plus_full: f64,
    pub f_minus_full: f64,
    pub f_plus_nodephase: f64,
    pub f_minus_nodephase: f64,
}

/// `F±_model(T)` with and without the dephasing step. `v[i]` is the visibility
/// at `t_list[i]`; `photon_fraction[i]` is the share of photon–photon
/// coincidences with `|t1 − t2| ≤ T` (uniform when `None`).
pub fn model_fidelity_curve(
    inputs: &FidelityInputs,
    t_list: &[f64],
    v: &[f64],
    photon_fraction: Option<&[f64]>,
) -> Result<Vec<FidelityPoint>> {
    if v.len() != t_list.len() || photon_fraction.is_some_and(|f| f.len() != t_list.len()) {
        return Err(Error::InvalidParameter("visibility and window lists differ in length".into()));
    }
    t_list
        .iter()
        .enumerate()
        .map(|(i, &t)| {
            let f_bg = uniform_band_fraction(t, inputs.window);
            let f_ph = photon_fraction.map_or(f_bg, |f| f[i]);
            let fid = |sign: BellSign, b: &BackgroundBudget, vis: Option<f64>| -> Result<f64> {
                let rho = model_state(&b.scaled(f_ph, f_bg), vis, inputs.f_ip, sign, inputs.phi)?;
                Ok(bell_fidelity(&rho, sign, inputs.phi))
            };
            Ok(FidelityPoint {
                t,
                v: v[i],
                f_plus_full: fid(BellSign::Plus, &inputs.budget_plus, Some(v[i]))?,
                f_minus_full: fid(BellSign::Minus, &inputs.budget_minus, Some(v[i]))?,
                f_plus_nodephase: fid(BellSign::Plus, &inputs.budget_plus, None)?,
                f_minus_nodephase: fid(BellSign::Minus, &inputs.budget_minus, None)?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn budget(a: f64, b: f64, g: f64) -> BackgroundBudget {
        BackgroundBudget { p_ph_ph: a, p_ph_bg: b, p_bg_bg: g }
    }

    #[test]
    fn snspd_pair_budget() {
        let t = DetectorTable::default();
        let b = coincidence_probs(&t, Detector::Snspd1, Detector::Snspd2).unwrap();
        assert_relative_eq!(b.p_ph_ph, 0.0019 * 0.0362 + 0.0282 * 0.0024, max_relative = 1e-12);
        assert!((b.p_ph_ph - 1.365e-4).abs() < 5e-7);
        let r = coincidence_probs(&t, Detector::Snspd2, Detector::Snspd1).unwrap();
        assert_relative_eq!(r.p_ph_ph, b.p_ph_ph, max_relative = 1e-15);
        assert_relative_eq!(r.p_ph_bg, b.p_ph_bg, max_relative = 1e-15);
        assert_relative_eq!(r.p_bg_bg, b.p_bg_bg, max_relative = 1e-15);
        assert!(coincidence_probs(&t, Detector::Spcm1, Detector::Spcm1).is_err());
    }

    #[test]
    fn zero_background_budget() {
        let mut t = DetectorTable::default();
        for r in t.rows.iter_mut() {
            r.p_bg_det = 0.0;
        }
        let b = coincidence_probs(&t, Detector::Spcm1, Detector::Snspd2).unwrap();
        assert_eq!((b.p_ph_bg, b.p_bg_bg), (0.0, 0.0));
    }

    #[test]
    fn background_state_limits() {
        let rho = rho_with_background(&budget(1e-4, 0.0, 0.0), BellSign::Minus, 0.8).unwrap();
        assert!((rho - bell_projector(BellSign::Minus, 0.8)).camax() < 1e-15);
        let rho = rho_with_background(&budget(0.0, 2e-6, 1e-9), BellSign::Plus, 0.0).unwrap();
        assert!((rho - Mat4::identity() * c(0.25)).camax() < 1e-15);
        assert!(matches!(rho_with_background(&budget(0.0, 0.0, 0.0), BellSign::Plus, 0.0), Err(Error::Degenerate(_))));
    }

    proptest! {
        #[test]
        fn block_form_equals_white_noise(a in 0.0..1e-3f64, b in 0.0..1e-4f64, g in 0.0..1e-6f64, phi in 0.0..6.3f64, plus: bool) {
            prop_assume!(a + b + g > 0.0);
            let sign = if plus { BellSign::Plus } else { BellSign::Minus };
            let x = rho_with_background(&budget(a, b, g), sign, phi).unwrap();
            let y = rho_with_background_white_noise(&budget(a, b, g), sign, phi).unwrap();
            prop_assert!((x - y).camax() < 1e-15);
            prop_assert!(validate_state(&x).is_ok());
            prop_assert!((x[(1, 2)].norm() - a / 2.0 / (a + b + g)).abs() < 1e-15);
        }
    }

    #[test]
    fn dephasing_cases() {
        let rho = rho_with_background(&budget(1e-4, 1e-5, 0.0), BellSign::Plus, 0.2).unwrap();
        assert!((apply_dephasing(&rho, 1.0) - rho).camax() < 1e-16);
        let d = apply_dephasing(&rho, 0.0);
        assert!((d - Mat4::from_diagonal(&rho.diagonal())).camax() < 1e-16);
        let v = 0.63;
        let pure = apply_dephasing(&bell_projector(BellSign::Plus, 0.2), v);
        let want = bell_projector(BellSign::Plus, 0.2) * c((1.0 + v) / 2.0) + bell_projector(BellSign::Minus, 0.2) * c((1.0 - v) / 2.0);
        assert!((pure - want).camax() < 1e-15);
        assert!((bell_fidelity(&pure, BellSign::Plus, 0.2) - (1.0 + v) / 2.0).abs() <= 4.0 * f64::EPSILON);
        assert!((apply_dephasing(&rho, 1.07) - rho).camax() < 1e-16);
    }

    #[test]
    fn depolarizing_numbers() {
        let f = ion_ion_fidelity(0.938, 0.956).unwrap();
        assert!((f - 0.89763).abs() < 1e-5);
        assert!((depolarizing_lambda(f) - 0.86351).abs() < 1e-5);
        assert_eq!(ion_ion_fidelity(0.25, 0.9).unwrap(), 0.25);
        assert_eq!(depolarizing_lambda(ion_ion_fidelity(1.0, 1.0).unwrap()), 1.0);
        assert!(matches!(ion_ion_fidelity(0.2, 0.9), Err(Error::Domain(_))));
        let rho = bell_projector(BellSign::Plus, 0.0);
        assert!((depolarizing_correction(&rho, 1.0, 1.0).unwrap() - rho).camax() < 1e-15);
    }

    #[test]
    fn ideal_inputs_give_unit_fidelity() {
        let inputs = FidelityInputs {
            budget_plus: budget(1e-4, 0.0, 0.0),
            budget_minus: budget(1e-4, 0.0, 0.0),
            f_ip: (1.0, 1.0),
            phi: 0.0,
            window: 17.5e-6,
        };
        let ts = [1e-6, 5e-6, 17.5e-6];
        for p in model_fidelity_curve(&inputs, &ts, &[1.0; 3], None).unwrap() {
            for f in [p.f_plus_full, p.f_minus_full, p.f_plus_nodephase, p.f_minus_nodephase] {
                assert_relative_eq!(f, 1.0, epsilon = 1e-14);
            }
        }
    }

    #[test]
    fn fidelity_drops_with_background() {
        let mut prev = 1.0;
        for k in 0..10 {
            let b = budget(1e-4, 1e-6 * k as f64, 1e-9 * k as f64);
            let f = bell_fidelity(&model_state(&b, Some(0.8), (0.95, 0.95), BellSign::Plus, 0.0).unwrap(), BellSign::Plus, 0.0);
            assert!(f <= prev + 1e-15);
            prev = f;
        }
    }

    #[test]
    fn plus_exceeds_minus_with_table_budgets() {
        let inputs = FidelityInputs::from_table(&DetectorTable::default(), (0.938, 0.956)).unwrap();
        let ts = [1e-6, 5e-6, 17.5e-6];
        for p in model_fidelity_curve(&inputs, &ts, &[0.9, 0.6, 0.3], None).unwrap() {
            assert!(p.f_plus_full > p.f_minus_full);
        }
    }

    #[test]
    fn uniform_band() {
        assert_eq!(uniform_band_fraction(0.0, 1.0), 0.0);
        assert_eq!(uniform_band_fraction(2.0, 1.0), 1.0);
        assert_relative_eq!(uniform_band_fraction(0.5, 1.0), 0.75);
    }
}
