//! Butcher tableaus for explicit Runge-Kutta schemes.
//!
//! A tableau bundles the stage matrix `a`, quadrature weights `b`, optional
//! embedded weights `b*` for error estimation, stage abscissae `c`, and the
//! orders of the main and embedded schemes. Only explicit schemes are
//! representable: row `m` of `a` holds exactly `m` entries, so a stage can
//! depend only on earlier stages.

use crate::error::{Error, Result};
use crate::real::Real;

/// Coefficients of an explicit Runge-Kutta scheme, possibly with an embedded
/// lower-order scheme for step-size control.
#[derive(Debug, Clone, PartialEq)]
pub struct ButcherTableau<T> {
    name: &'static str,
    a: Vec<Vec<T>>,
    b: Vec<T>,
    b_star: Option<Vec<T>>,
    c: Vec<T>,
    order_high: u32,
    order_low: u32,
}

impl<T: Real> ButcherTableau<T> {
    /// Builds a tableau from raw coefficients and validates it.
    ///
    /// `order_low` is only meaningful when `b_star` is present; pass the main
    /// order for plain schemes.
    pub fn new(
        name: &'static str,
        a: Vec<Vec<T>>,
        b: Vec<T>,
        b_star: Option<Vec<T>>,
        c: Vec<T>,
        order_high: u32,
        order_low: u32,
    ) -> Result<Self> {
        let tableau = Self {
            name,
            a,
            b,
            b_star,
            c,
            order_high,
            order_low,
        };
        tableau.validate()?;
        Ok(tableau)
    }

    /// Forward Euler. One stage, first order, no embedded error estimate.
    pub fn euler() -> Self {
        Self::from_f64("euler", &[&[]], &[1.0], None, &[0.0], 1, 1)
    }

    /// The classic four-stage fourth-order scheme. No embedded estimate.
    pub fn rk4() -> Self {
        Self::from_f64(
            "rk4",
            &[&[], &[0.5], &[0.0, 0.5], &[0.0, 0.0, 1.0]],
            &[1.0 / 6.0, 1.0 / 3.0, 1.0 / 3.0, 1.0 / 6.0],
            None,
            &[0.0, 0.5, 0.5, 1.0],
            4,
            4,
        )
    }

    /// Cash-Karp 5(4): six stages, fifth order with an embedded fourth-order
    /// scheme.
    pub fn cash_karp() -> Self {
        Self::from_f64(
            "cash-karp",
            &[
                &[],
                &[1.0 / 5.0],
                &[3.0 / 40.0, 9.0 / 40.0],
                &[3.0 / 10.0, -9.0 / 10.0, 6.0 / 5.0],
                &[-11.0 / 54.0, 5.0 / 2.0, -70.0 / 27.0, 35.0 / 27.0],
                &[
                    1631.0 / 55296.0,
                    175.0 / 512.0,
                    575.0 / 13824.0,
                    44275.0 / 110592.0,
                    253.0 / 4096.0,
                ],
            ],
            &[
                37.0 / 378.0,
                0.0,
                250.0 / 621.0,
                125.0 / 594.0,
                0.0,
                512.0 / 1771.0,
            ],
            Some(&[
                2825.0 / 27648.0,
                0.0,
                18575.0 / 48384.0,
                13525.0 / 55296.0,
                277.0 / 14336.0,
                1.0 / 4.0,
            ]),
            &[0.0, 1.0 / 5.0, 3.0 / 10.0, 3.0 / 5.0, 1.0, 7.0 / 8.0],
            5,
            4,
        )
    }

    /// Dormand-Prince 5(4): seven stages (FSAL layout), fifth order with an
    /// embedded fourth-order scheme.
    pub fn dopri5() -> Self {
        Self::from_f64(
            "dopri5",
            &[
                &[],
                &[1.0 / 5.0],
                &[3.0 / 40.0, 9.0 / 40.0],
                &[44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0],
                &[
                    19372.0 / 6561.0,
                    -25360.0 / 2187.0,
                    64448.0 / 6561.0,
                    -212.0 / 729.0,
                ],
                &[
                    9017.0 / 3168.0,
                    -355.0 / 33.0,
                    46732.0 / 5247.0,
                    49.0 / 176.0,
                    -5103.0 / 18656.0,
                ],
                &[
                    35.0 / 384.0,
                    0.0,
                    500.0 / 1113.0,
                    125.0 / 192.0,
                    -2187.0 / 6784.0,
                    11.0 / 84.0,
                ],
            ],
            &[
                35.0 / 384.0,
                0.0,
                500.0 / 1113.0,
                125.0 / 192.0,
                -2187.0 / 6784.0,
                11.0 / 84.0,
                0.0,
            ],
            Some(&[
                5179.0 / 57600.0,
                0.0,
                7571.0 / 16695.0,
                393.0 / 640.0,
                -92097.0 / 339200.0,
                187.0 / 2100.0,
                1.0 / 40.0,
            ]),
            &[0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0],
            5,
            4,
        )
    }

    /// Looks a shipped tableau up by its CLI name.
    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "euler" => Ok(Self::euler()),
            "rk4" => Ok(Self::rk4()),
            "cash-karp" | "cash_karp" | "cashkarp" | "ck45" => Ok(Self::cash_karp()),
            "dopri5" | "dormand-prince" | "dormand_prince" => Ok(Self::dopri5()),
            other => Err(Error::Tableau(format!(
                "unknown tableau '{other}' (expected euler, rk4, cash-karp, or dopri5)"
            ))),
        }
    }

    fn from_f64(
        name: &'static str,
        a: &[&[f64]],
        b: &[f64],
        b_star: Option<&[f64]>,
        c: &[f64],
        order_high: u32,
        order_low: u32,
    ) -> Self {
        let convert = |row: &[f64]| row.iter().map(|&x| T::of(x)).collect::<Vec<T>>();
        Self::new(
            name,
            a.iter().map(|row| convert(row)).collect(),
            convert(b),
            b_star.map(convert),
            convert(c),
            order_high,
            order_low,
        )
        .expect("shipped tableau must validate")
    }

    /// Checks the structural and consistency conditions: strictly lower
    /// triangular `a`, `sum(b) = 1`, `c[m] = sum(a[m])`, matching lengths, and
    /// `order_low < order_high` whenever embedded weights are present.
    pub fn validate(&self) -> Result<()> {
        let s = self.b.len();
        if s == 0 {
            return Err(Error::Tableau("tableau needs at least one stage".into()));
        }
        if self.a.len() != s || self.c.len() != s {
            return Err(Error::Tableau(format!(
                "{}: a has {} rows and c has {} entries for {} stages",
                self.name,
                self.a.len(),
                self.c.len(),
                s
            )));
        }
        for (m, row) in self.a.iter().enumerate() {
            if row.len() != m {
                return Err(Error::Tableau(format!(
                    "{}: stage row {} has {} entries, explicit schemes need {}",
                    self.name,
                    m,
                    row.len(),
                    m
                )));
            }
        }
        if let Some(b_star) = &self.b_star {
            if b_star.len() != s {
                return Err(Error::Tableau(format!(
                    "{}: embedded weights have {} entries for {} stages",
                    self.name,
                    b_star.len(),
                    s
                )));
            }
            if self.order_low >= self.order_high {
                return Err(Error::Tableau(format!(
                    "{}: embedded order {} must be below main order {}",
                    self.name, self.order_low, self.order_high
                )));
            }
        }

        // Consistency checks are done against the coefficients as stored, so
        // the tolerance scales with the working precision: 1e-14 covers f64
        // rational coefficients, a few epsilon covers narrower types.
        let tol = T::of(1e-14).max(T::epsilon() * T::of(8.0));
        let one = T::one();
        let b_sum: T = self.b.iter().copied().sum();
        if (b_sum - one).abs() > tol {
            return Err(Error::Tableau(format!(
                "{}: quadrature weights sum to {} instead of 1",
                self.name, b_sum
            )));
        }
        if let Some(b_star) = &self.b_star {
            let sum: T = b_star.iter().copied().sum();
            if (sum - one).abs() > tol {
                return Err(Error::Tableau(format!(
                    "{}: embedded weights sum to {} instead of 1",
                    self.name, sum
                )));
            }
        }
        for (m, row) in self.a.iter().enumerate() {
            let row_sum: T = row.iter().copied().sum();
            if (row_sum - self.c[m]).abs() > tol {
                return Err(Error::Tableau(format!(
                    "{}: row {} of a sums to {} but c = {}",
                    self.name, m, row_sum, self.c[m]
                )));
            }
        }
        Ok(())
    }

    /// Scheme name as used on the command line.
    pub fn name(&self) -> &'static str {
        self.name
    }

    /// Number of stages `s`.
    pub fn stages(&self) -> usize {
        self.b.len()
    }

    /// True when embedded weights are available for error estimation.
    pub fn is_adaptive(&self) -> bool {
        self.b_star.is_some()
    }

    /// Stage matrix rows; row `m` holds the coefficients for stages `0..m`.
    pub fn a(&self) -> &[Vec<T>] {
        &self.a
    }

    /// Quadrature weights of the main scheme.
    pub fn b(&self) -> &[T] {
        &self.b
    }

    /// Embedded quadrature weights, when present.
    pub fn b_star(&self) -> Option<&[T]> {
        self.b_star.as_deref()
    }

    /// Stage abscissae.
    pub fn c(&self) -> &[T] {
        &self.c
    }

    /// Order of the main scheme.
    pub fn order_high(&self) -> u32 {
        self.order_high
    }

    /// Order of the embedded scheme. Only meaningful when [`Self::is_adaptive`]
    /// holds.
    pub fn order_low(&self) -> u32 {
        self.order_low
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn shipped() -> Vec<ButcherTableau<f64>> {
        vec![
            ButcherTableau::euler(),
            ButcherTableau::rk4(),
            ButcherTableau::cash_karp(),
            ButcherTableau::dopri5(),
        ]
    }

    #[test]
    fn shipped_tableaus_validate() {
        for tab in shipped() {
            tab.validate().unwrap();
        }
    }

    #[test]
    fn weights_sum_to_one_and_rows_match_abscissae() {
        for tab in shipped() {
            let b_sum: f64 = tab.b().iter().sum();
            assert!((b_sum - 1.0).abs() <= 1e-14, "{}: {b_sum}", tab.name());
            if let Some(b_star) = tab.b_star() {
                let sum: f64 = b_star.iter().sum();
                assert!((sum - 1.0).abs() <= 1e-14, "{}: {sum}", tab.name());
            }
            for (m, row) in tab.a().iter().enumerate() {
                let row_sum: f64 = row.iter().sum();
                assert!(
                    (row_sum - tab.c()[m]).abs() <= 1e-14,
                    "{} row {m}: {row_sum} vs {}",
                    tab.name(),
                    tab.c()[m]
                );
            }
        }
    }

    #[test]
    fn stage_counts_and_orders() {
        let euler = ButcherTableau::<f64>::euler();
        assert_eq!(euler.stages(), 1);
        assert_eq!(euler.order_high(), 1);
        assert!(!euler.is_adaptive());

        let rk4 = ButcherTableau::<f64>::rk4();
        assert_eq!(rk4.stages(), 4);
        assert_eq!(rk4.order_high(), 4);
        assert!(!rk4.is_adaptive());

        let ck = ButcherTableau::<f64>::cash_karp();
        assert_eq!(ck.stages(), 6);
        assert_eq!((ck.order_high(), ck.order_low()), (5, 4));
        assert!(ck.is_adaptive());

        let dp = ButcherTableau::<f64>::dopri5();
        assert_eq!(dp.stages(), 7);
        assert_eq!((dp.order_high(), dp.order_low()), (5, 4));
        assert!(dp.is_adaptive());
    }

    #[test]
    fn embedded_order_must_be_lower() {
        let err = ButcherTableau::<f64>::new(
            "bad",
            vec![vec![]],
            vec![1.0],
            Some(vec![1.0]),
            vec![0.0],
            1,
            1,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Tableau(_)));
    }

    #[test]
    fn inconsistent_weights_are_rejected() {
        let err = ButcherTableau::<f64>::new(
            "bad",
            vec![vec![], vec![0.5]],
            vec![0.5, 0.4],
            None,
            vec![0.0, 0.5],
            2,
            2,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Tableau(_)));
    }

    #[test]
    fn unknown_name_is_an_error() {
        assert!(ButcherTableau::<f64>::by_name("rk45x").is_err());
    }

    #[test]
    fn tableaus_build_in_single_precision() {
        let ck = ButcherTableau::<f32>::cash_karp();
        assert_eq!(ck.stages(), 6);
        ck.validate().unwrap();
    }
}
